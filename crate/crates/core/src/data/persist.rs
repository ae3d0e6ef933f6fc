//! Bit-exact binary model files.
//!
//! Layout (all integers u32 little-endian, all reals f64 little-endian):
//!
//! ```text
//! header   "DDMMDL01" | version | K | M | J | widths[J] | D | projection kind (u8: 0 select, 1 PCA)
//! encoder  for each layer j: weights (widths[j] × in_j, row-major), bias (widths[j]); in_0 = K
//!          threshold
//! decoder  for each of M layers: weights (K × K, row-major), bias (K)
//! marginal α, β
//! preproc  margin | mean (D) | scale (K) | basis (D × K row-major) or kept indices (K × u32)
//!          | squash_low (K) | squash_high (K)
//! ```
//!
//! Every size is determined by the header, so [`predicted_size`] can check a
//! file before parsing the payload.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::preprocess::{Preprocessor, Projection};
use crate::beta::BetaParams;
use crate::density::ModelBundle;
use crate::error::{Error, Result};
use crate::network::{Decoder, Encoder, Layer};

pub const MODEL_MAGIC: &[u8; 8] = b"DDMMDL01";
pub const FORMAT_VERSION: u32 = 1;

/// Dimensions recorded in a model file header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelHeader {
    pub version: u32,
    pub dim: usize,
    pub decoder_layers: usize,
    pub encoder_widths: Vec<usize>,
    pub input_dim: usize,
    pub pca: bool,
}

impl ModelHeader {
    pub fn of(model: &ModelBundle) -> Self {
        Self {
            version: FORMAT_VERSION,
            dim: model.dim(),
            decoder_layers: model.decoder.depth(),
            encoder_widths: model.encoder.widths(),
            input_dim: model.input_dim(),
            pca: matches!(model.preprocessor.projection, Projection::Pca(_)),
        }
    }
}

/// Exact file size in bytes implied by a header.
pub fn predicted_size(h: &ModelHeader) -> usize {
    let (k, d) = (h.dim, h.input_dim);
    let header = 8 + 4 * 4 + 4 * h.encoder_widths.len() + 4 + 1;
    let mut reals = 0;
    let mut input = k;
    for &w in &h.encoder_widths {
        reals += w * input + w;
        input = w;
    }
    reals += 1; // threshold
    reals += h.decoder_layers * (k * k + k);
    reals += 2; // marginal
    reals += 1 + d + k + 2 * k; // margin, mean, scale, squash bounds
    let projection = if h.pca { 8 * d * k } else { 4 * k };
    header + 8 * reals + projection
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn matrix(&mut self, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }

    fn vector(&mut self, v: &DVector<f64>) {
        for &x in v.iter() {
            self.f64(x);
        }
    }

    fn layer(&mut self, l: &Layer) {
        self.matrix(&l.weights);
        self.vector(&l.bias);
    }
}

/// Serializes a model to bytes.
pub fn encode_model(model: &ModelBundle) -> Vec<u8> {
    let h = ModelHeader::of(model);
    let mut w = Writer(Vec::with_capacity(predicted_size(&h)));
    w.0.extend_from_slice(MODEL_MAGIC);
    w.u32(FORMAT_VERSION as usize);
    w.u32(h.dim);
    w.u32(h.decoder_layers);
    w.u32(h.encoder_widths.len());
    for &width in &h.encoder_widths {
        w.u32(width);
    }
    w.u32(h.input_dim);
    w.0.push(h.pca as u8);
    for l in model.encoder.layers() {
        w.layer(l);
    }
    w.f64(model.encoder.threshold());
    for l in model.decoder.layers() {
        w.layer(l);
    }
    w.f64(model.marginal.alpha());
    w.f64(model.marginal.beta());
    let p = &model.preprocessor;
    w.f64(p.margin);
    w.vector(&p.mean);
    w.vector(&p.scale);
    match &p.projection {
        Projection::Pca(basis) => w.matrix(basis),
        Projection::Select(keep) => keep.iter().for_each(|&i| w.u32(i)),
    }
    w.vector(&p.squash_low);
    w.vector(&p.squash_high);
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.offset + n;
        let chunk = self.bytes.get(self.offset..end).ok_or_else(|| {
            Error::ModelFormat(format!("truncated model file at byte {}", self.offset))
        })?;
        self.offset = end;
        Ok(chunk)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64()?;
            }
        }
        Ok(m)
    }

    fn vector(&mut self, n: usize) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(n);
        for i in 0..n {
            v[i] = self.f64()?;
        }
        Ok(v)
    }

    fn layer(&mut self, input: usize, output: usize) -> Result<Layer> {
        let weights = self.matrix(output, input)?;
        let bias = self.vector(output)?;
        Layer::new(weights, bias)
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<ModelHeader> {
    if r.take(8)? != MODEL_MAGIC {
        return Err(Error::ModelFormat("bad magic; not a model file".into()));
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let dim = r.u32()?;
    let decoder_layers = r.u32()?;
    let j = r.u32()?;
    // Guard against absurd counts before allocating.
    if j > r.bytes.len() / 4 {
        return Err(Error::ModelFormat(format!(
            "encoder depth {j} exceeds file size"
        )));
    }
    let encoder_widths = (0..j).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let input_dim = r.u32()?;
    let pca = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::ModelFormat(format!("unknown projection kind {b}"))),
    };
    Ok(ModelHeader {
        version,
        dim,
        decoder_layers,
        encoder_widths,
        input_dim,
        pca,
    })
}

/// Parses a model from bytes.
pub fn decode_model(bytes: &[u8]) -> Result<ModelBundle> {
    let mut r = Reader { bytes, offset: 0 };
    let h = read_header(&mut r)?;
    let expected = predicted_size(&h);
    if bytes.len() != expected {
        return Err(Error::ModelFormat(format!(
            "model file holds {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let k = h.dim;
    let mut encoder_layers = Vec::with_capacity(h.encoder_widths.len());
    let mut input = k;
    for &w in &h.encoder_widths {
        encoder_layers.push(r.layer(input, w)?);
        input = w;
    }
    let threshold = r.f64()?;
    let encoder = Encoder::new(encoder_layers, threshold)?;
    let decoder_layers = (0..h.decoder_layers)
        .map(|_| r.layer(k, k))
        .collect::<Result<Vec<_>>>()?;
    let decoder = Decoder::new(decoder_layers)?;
    let alpha = r.f64()?;
    let beta = r.f64()?;
    let marginal = BetaParams::new(alpha, beta)?;
    let margin = r.f64()?;
    let mean = r.vector(h.input_dim)?;
    let scale = r.vector(k)?;
    let projection = if h.pca {
        Projection::Pca(r.matrix(h.input_dim, k)?)
    } else {
        let keep = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if keep.iter().any(|&i| i >= h.input_dim) {
            return Err(Error::ModelFormat(
                "kept dimension index out of range".into(),
            ));
        }
        Projection::Select(keep)
    };
    let squash_low = r.vector(k)?;
    let squash_high = r.vector(k)?;
    let preprocessor = Preprocessor {
        mean,
        projection,
        scale,
        squash_low,
        squash_high,
        margin,
    };
    ModelBundle::new(encoder, decoder, marginal, preprocessor)
}

pub fn save_model(model: &ModelBundle, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(Error::io(path))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    decode_model(&fs::read(path).map_err(Error::io(path))?)
}
