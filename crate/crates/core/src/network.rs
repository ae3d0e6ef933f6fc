//! Sigmoid layer stacks: the bijective decoder and the free-form encoder.
//!
//! Batches are matrices with one column per example.

use nalgebra::{DMatrix, DVector, LU, SVD};

use crate::error::{Error, Result};

/// Clamp used before taking a logit of a value that should lie in (0, 1).
pub const LOGIT_CLAMP: f64 = 1e-12;

/// Singular values below this are treated as zero by the condition penalty.
pub const SINGULAR_VALUE_FLOOR: f64 = 1e-12;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`]; fails at or outside the interval ends.
pub fn logit(y: f64) -> Result<f64> {
    if y > 0.0 && y < 1.0 {
        Ok(y.ln() - (-y).ln_1p())
    } else {
        Err(Error::domain("logit", y))
    }
}

/// ln σ′(z) = ln σ(z) + ln σ(−z), stable for large |z|.
pub fn log_sigmoid_derivative(z: f64) -> f64 {
    let a = z.abs();
    -a - 2.0 * (-a).exp().ln_1p()
}

/// One affine map followed by an elementwise sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::DimensionMismatch {
                what: "layer bias",
                expected: weights.nrows(),
                got: bias.len(),
            });
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("layer parameters must be finite".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weights: DMatrix::identity(dim, dim),
            bias: DVector::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Ω x + ω for every column of `input`.
    pub fn pre_activation(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weights * input;
        for mut col in z.column_iter_mut() {
            col += &self.bias;
        }
        z
    }

    pub fn forward(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        self.pre_activation(input).map(sigmoid)
    }

    /// Parameters flattened as weights (row-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for r in 0..self.weights.nrows() {
            out.extend(self.weights.row(r).iter());
        }
        out.extend(self.bias.iter());
        out
    }

    pub fn from_flat(&self, flat: &[f64]) -> Layer {
        let (rows, cols) = self.weights.shape();
        debug_assert_eq!(flat.len(), self.param_count());
        Layer {
            weights: DMatrix::from_row_slice(rows, cols, &flat[..rows * cols]),
            bias: DVector::from_column_slice(&flat[rows * cols..]),
        }
    }
}

/// Gradient with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LayerGradient {
    pub fn zeros_like(layer: &Layer) -> Self {
        Self {
            weights: DMatrix::zeros(layer.output_dim(), layer.input_dim()),
            bias: DVector::zeros(layer.output_dim()),
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.weights.norm_squared() + self.bias.norm_squared()
    }

    pub fn add_scaled(&mut self, other: &LayerGradient, scale: f64) {
        self.weights += &other.weights * scale;
        self.bias.axpy(scale, &other.bias, 1.0);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.weights.len() + self.bias.len());
        for r in 0..self.weights.nrows() {
            out.extend(self.weights.row(r).iter());
        }
        out.extend(self.bias.iter());
        out
    }
}

/// Intermediate values of a forward pass, kept for reverse accumulation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each layer.
    pub inputs: Vec<DMatrix<f64>>,
    /// Sigmoid output of each layer (before any threshold).
    pub outputs: Vec<DMatrix<f64>>,
}

impl ForwardTrace {
    pub fn last_output(&self) -> &DMatrix<f64> {
        self.outputs.last().expect("trace of a nonempty stack")
    }
}

fn trace_layers(layers: &[Layer], input: &DMatrix<f64>) -> ForwardTrace {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut outputs = Vec::with_capacity(layers.len());
    let mut current = input.clone();
    for layer in layers {
        let out = layer.forward(&current);
        inputs.push(current);
        current = out.clone();
        outputs.push(out);
    }
    ForwardTrace { inputs, outputs }
}

/// Reverse accumulation through a sigmoid stack. `grad_output` is the loss
/// gradient with respect to the final sigmoid output; returns the per-layer
/// parameter gradients and the gradient with respect to the stack input.
pub fn backprop(
    layers: &[Layer],
    trace: &ForwardTrace,
    grad_output: DMatrix<f64>,
) -> (Vec<LayerGradient>, DMatrix<f64>) {
    let mut grads = Vec::with_capacity(layers.len());
    let mut upstream = grad_output;
    for (m, layer) in layers.iter().enumerate().rev() {
        let out = &trace.outputs[m];
        let delta = upstream.zip_map(out, |g, y| g * y * (1.0 - y));
        let weights = &delta * trace.inputs[m].transpose();
        let bias = delta.column_sum();
        upstream = layer.weights.tr_mul(&delta);
        grads.push(LayerGradient { weights, bias });
    }
    grads.reverse();
    (grads, upstream)
}

fn check_rows(what: &'static str, expected: usize, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != expected {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got: m.nrows(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct LayerFactor {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    log_abs_det: f64,
    singular: bool,
}

impl LayerFactor {
    fn new(weights: &DMatrix<f64>) -> Self {
        let lu = weights.clone().lu();
        let u = lu.u();
        let diag = u.diagonal();
        let max_pivot = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min_pivot = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let singular =
            !(min_pivot.is_finite() && min_pivot > 1e-14 * max_pivot.max(f64::MIN_POSITIVE));
        let log_abs_det = diag.iter().map(|v| v.abs().ln()).sum();
        Self {
            lu,
            log_abs_det,
            singular,
        }
    }
}

/// The bijective map from the latent cube to observed space: square sigmoid
/// layers applied first to last. LU factors of every weight matrix are
/// cached and refreshed whenever a layer is replaced.
#[derive(Debug, Clone)]
pub struct Decoder {
    layers: Vec<Layer>,
    factors: Vec<LayerFactor>,
}

impl PartialEq for Decoder {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Decoder {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Config("decoder needs at least one layer".into()));
        };
        let dim = first.output_dim();
        for layer in &layers {
            if layer.input_dim() != dim || layer.output_dim() != dim {
                return Err(Error::DimensionMismatch {
                    what: "square decoder layer",
                    expected: dim,
                    got: layer.input_dim().max(layer.output_dim()),
                });
            }
        }
        let factors = layers
            .iter()
            .map(|l| LayerFactor::new(&l.weights))
            .collect();
        Ok(Self { layers, factors })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].output_dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    /// Replaces layer `m` and refreshes its cached factorization.
    pub fn set_layer(&mut self, m: usize, layer: Layer) -> Result<()> {
        let dim = self.dim();
        if layer.input_dim() != dim || layer.output_dim() != dim {
            return Err(Error::DimensionMismatch {
                what: "square decoder layer",
                expected: dim,
                got: layer.input_dim(),
            });
        }
        self.factors[m] = LayerFactor::new(&layer.weights);
        self.layers[m] = layer;
        Ok(())
    }

    /// ln |det Ω_m| from the cached factorization.
    pub fn log_abs_det(&self, m: usize) -> Result<f64> {
        let f = &self.factors[m];
        if f.singular {
            return Err(Error::SingularLayer { layer: m });
        }
        Ok(f.log_abs_det)
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(self.forward_batch(&m)?.column(0).into_owned())
    }

    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_rows("decoder input", self.dim(), x)?;
        Ok(self.layers.iter().fold(x.clone(), |acc, l| l.forward(&acc)))
    }

    pub fn trace(&self, x: &DMatrix<f64>) -> Result<ForwardTrace> {
        check_rows("decoder input", self.dim(), x)?;
        Ok(trace_layers(&self.layers, x))
    }

    /// Analytic inverse: per layer in reverse, solve Ω x = logit(y) − ω.
    pub fn inverse(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.inverse_trace(y)?.swap_remove(0))
    }

    /// States visited by the inverse pass: element `m` is the input to layer
    /// `m`, and the last element is `y` itself. Fails with a domain error when
    /// an intermediate state leaves (0, 1), i.e. `y` is outside the image.
    pub fn inverse_trace(&self, y: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "decoder output",
                expected: self.dim(),
                got: y.len(),
            });
        }
        let mut states = vec![y.clone()];
        let mut current = y.clone();
        for (m, layer) in self.layers.iter().enumerate().rev() {
            let f = &self.factors[m];
            if f.singular {
                return Err(Error::SingularLayer { layer: m });
            }
            let mut rhs = DVector::zeros(current.len());
            for k in 0..current.len() {
                rhs[k] = logit(current[k])? - layer.bias[k];
            }
            current = f.lu.solve(&rhs).ok_or(Error::SingularLayer { layer: m })?;
            states.push(current.clone());
        }
        states.reverse();
        Ok(states)
    }

    pub fn inverse_batch(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_rows("decoder output", self.dim(), y)?;
        let mut out = DMatrix::zeros(y.nrows(), y.ncols());
        for (j, col) in y.column_iter().enumerate() {
            out.set_column(j, &self.inverse(&col.into_owned())?);
        }
        Ok(out)
    }

    /// ln |det ∂f/∂x| at `x`.
    pub fn log_det_jacobian(&self, x: &DVector<f64>) -> Result<f64> {
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(self.log_det_jacobian_batch(&m)?[0])
    }

    pub fn log_det_jacobian_batch(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_rows("decoder input", self.dim(), x)?;
        let mut total = 0.0;
        for m in 0..self.depth() {
            total += self.log_abs_det(m)?;
        }
        let mut out = DVector::from_element(x.ncols(), total);
        let mut current = x.clone();
        for layer in &self.layers {
            let z = layer.pre_activation(&current);
            for (j, col) in z.column_iter().enumerate() {
                out[j] += col.iter().map(|&v| log_sigmoid_derivative(v)).sum::<f64>();
            }
            current = z.map(sigmoid);
        }
        Ok(out)
    }
}

/// The training-time map from observed space to the latent cube. Outputs of
/// the last layer below `threshold` are set to exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    layers: Vec<Layer>,
    threshold: f64,
}

impl Encoder {
    pub fn new(layers: Vec<Layer>, threshold: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(Error::DimensionMismatch {
                    what: "encoder layer chain",
                    expected: pair[0].output_dim(),
                    got: pair[1].input_dim(),
                });
            }
        }
        if !(0.0..0.5).contains(&threshold) {
            return Err(Error::Config(format!(
                "encoder threshold must lie in [0, 0.5), got {threshold}"
            )));
        }
        Ok(Self { layers, threshold })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Layer::output_dim).unwrap_or(0)
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::output_dim).collect()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn set_layer(&mut self, j: usize, layer: Layer) -> Result<()> {
        let old = &self.layers[j];
        if old.weights.shape() != layer.weights.shape() {
            return Err(Error::DimensionMismatch {
                what: "encoder layer",
                expected: old.param_count(),
                got: layer.param_count(),
            });
        }
        self.layers[j] = layer;
        Ok(())
    }

    pub fn apply_threshold(&self, values: &DMatrix<f64>) -> DMatrix<f64> {
        let eps = self.threshold;
        values.map(|v| if v < eps { 0.0 } else { v })
    }

    pub fn forward(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let m = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
        Ok(self.forward_batch(&m)?.column(0).into_owned())
    }

    pub fn forward_batch(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_rows("encoder input", self.input_dim(), y)?;
        let raw = self.layers.iter().fold(y.clone(), |acc, l| l.forward(&acc));
        Ok(self.apply_threshold(&raw))
    }

    /// Forward pass keeping intermediates; the threshold is not applied to the
    /// trace, callers apply it to [`ForwardTrace::last_output`].
    pub fn trace(&self, y: &DMatrix<f64>) -> Result<ForwardTrace> {
        check_rows("encoder input", self.input_dim(), y)?;
        Ok(trace_layers(&self.layers, y))
    }
}

fn layer_condition(weights: &DMatrix<f64>, with_grad: bool) -> (f64, Option<DMatrix<f64>>) {
    let svd = SVD::new(weights.clone(), with_grad, with_grad);
    let sv = &svd.singular_values;
    let (mut imax, mut imin) = (0, 0);
    for i in 0..sv.len() {
        if sv[i] > sv[imax] {
            imax = i;
        }
        if sv[i] < sv[imin] {
            imin = i;
        }
    }
    let smax = sv[imax];
    let smin_raw = sv[imin];
    let near_singular = !(smin_raw >= SINGULAR_VALUE_FLOOR);
    let smin = if near_singular {
        SINGULAR_VALUE_FLOOR
    } else {
        smin_raw
    };
    let smax = smax.max(smin);
    let value = (smax / smin).ln();
    if !with_grad {
        return (value, None);
    }
    let (u, vt) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
    let mut grad = DMatrix::zeros(weights.nrows(), weights.ncols());
    // Equal extreme singular values: the penalty sits at its minimum.
    if smax / smin - 1.0 > 1e-10 {
        grad += u.column(imax) * vt.row(imax) / smax;
        if !near_singular {
            grad -= u.column(imin) * vt.row(imin) / smin;
        }
    }
    (value, Some(grad))
}

/// Mean over decoder layers of ln(σ_max / σ_min) of the weight matrices.
pub fn condition_penalty(decoder: &Decoder) -> f64 {
    let total: f64 = decoder
        .layers()
        .iter()
        .map(|l| layer_condition(&l.weights, false).0)
        .sum();
    total / decoder.depth() as f64
}

/// [`condition_penalty`] and its gradient with respect to every weight matrix.
pub fn condition_penalty_with_grad(decoder: &Decoder) -> (f64, Vec<DMatrix<f64>>) {
    let m = decoder.depth() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(decoder.depth());
    for layer in decoder.layers() {
        let (v, g) = layer_condition(&layer.weights, true);
        total += v;
        grads.push(g.unwrap() / m);
    }
    (total / m, grads)
}
