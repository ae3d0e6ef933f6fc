//! The IDX binary format used by the MNIST distribution: a big-endian magic
//! number whose third byte is the element type (0x08, unsigned byte) and
//! fourth byte the number of dimensions, followed by the dimension sizes as
//! big-endian u32 and then the payload in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use super::Dataset;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        let end = self.offset + 4;
        let Some(chunk) = self.bytes.get(self.offset..end) else {
            return Err(Error::Parse {
                offset: self.offset as u64,
                message: "truncated header".into(),
            });
        };
        self.offset = end;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.offset;
        if available != len {
            return Err(Error::Parse {
                offset: (self.offset + available.min(len)) as u64,
                message: format!("header promises {len} payload bytes, file holds {available}"),
            });
        }
        Ok(&self.bytes[self.offset..])
    }
}

fn expect_magic(reader: &mut Reader<'_>, magic: u32) -> Result<()> {
    let got = reader.u32_be()?;
    if got != magic {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic 0x{got:08x}, expected 0x{magic:08x}"),
        });
    }
    Ok(())
}

/// Parses an image file; pixels are scaled from bytes to [0, 1].
pub fn parse_images(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let mut r = Reader { bytes, offset: 0 };
    expect_magic(&mut r, IMAGE_MAGIC)?;
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let dim = rows * cols;
    let payload = r.payload(count * dim)?;
    Ok(DMatrix::from_fn(dim, count, |i, j| {
        payload[j * dim + i] as f64 / 255.0
    }))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<i64>> {
    let mut r = Reader { bytes, offset: 0 };
    expect_magic(&mut r, LABEL_MAGIC)?;
    let count = r.u32_be()? as usize;
    Ok(r.payload(count)?.iter().map(|&b| b as i64).collect())
}

/// Loads an image file, and optionally its label file, into a dataset.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let points = parse_images(&fs::read(images).map_err(Error::io(images))?)?;
    let labels = match labels {
        Some(p) => {
            let l = parse_labels(&fs::read(p).map_err(Error::io(p))?)?;
            if l.len() != points.ncols() {
                return Err(Error::Data(format!(
                    "{} labels for {} images",
                    l.len(),
                    points.ncols()
                )));
            }
            Some(l)
        }
        None => None,
    };
    Dataset::new(points, labels, format!("idx:{}", images.display()))
}

/// Serializes images (one per column, values in [0, 1]) with the given
/// shape; values are rounded to the nearest byte.
pub fn encode_images(points: &DMatrix<f64>, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != points.nrows() {
        return Err(Error::DimensionMismatch {
            what: "IDX image shape",
            expected: points.nrows(),
            got: rows * cols,
        });
    }
    let mut out = Vec::with_capacity(16 + points.len());
    for v in [IMAGE_MAGIC, points.ncols() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for col in points.column_iter() {
        out.extend(
            col.iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}

pub fn encode_labels(labels: &[i64]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l)
            .map_err(|_| Error::Data(format!("label {l} does not fit in a byte")))?;
        out.push(b);
    }
    Ok(out)
}

pub fn write_idx(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(bytes).map_err(Error::io(path))?;
    Ok(())
}
