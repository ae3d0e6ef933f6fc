//! Normalized density evaluation, ancestral sampling and entropy
//! characterization of a trained model.
//!
//! Densities always go through the exact decoder inverse; the encoder is
//! never used for evaluation.

use std::thread;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::beta::{sym_kl, BetaParams, MomentFit};
use crate::data::Preprocessor;
use crate::error::{Error, Result};
use crate::network::{Decoder, Encoder};
use crate::special::{beta_log_pdf, beta_sample, digamma, log_beta, regularized_incomplete_beta};

/// A log-density, or the typed marker for a point the model assigns zero
/// density (outside the decoder's image, or a failed inversion).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogDensity {
    Finite(f64),
    OutOfSupport,
}

impl LogDensity {
    /// The value, with out-of-support mapped to −∞.
    pub fn value(self) -> f64 {
        match self {
            LogDensity::Finite(v) => v,
            LogDensity::OutOfSupport => f64::NEG_INFINITY,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            LogDensity::Finite(v) => Some(v),
            LogDensity::OutOfSupport => None,
        }
    }
}

/// Log-density of a point already in the model's unit cube, without any
/// preprocessing correction:
/// Σ_k ln q(x_k) − ln|det ∂f/∂x| at x = f⁻¹(y).
pub fn latent_log_density(
    decoder: &Decoder,
    marginal: BetaParams,
    y: &DVector<f64>,
) -> Result<LogDensity> {
    let x = match decoder.inverse(y) {
        Ok(x) => x,
        Err(Error::Domain { .. } | Error::SingularLayer { .. }) => {
            return Ok(LogDensity::OutOfSupport)
        }
        Err(e) => return Err(e),
    };
    if x.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Ok(LogDensity::OutOfSupport);
    }
    let mut total = 0.0;
    for &v in x.iter() {
        total += beta_log_pdf(v, marginal)?;
    }
    let log_det = match decoder.log_det_jacobian(&x) {
        Ok(v) => v,
        Err(Error::SingularLayer { .. }) => return Ok(LogDensity::OutOfSupport),
        Err(e) => return Err(e),
    };
    let value = total - log_det;
    Ok(if value.is_finite() {
        LogDensity::Finite(value)
    } else {
        LogDensity::OutOfSupport
    })
}

/// Everything needed to evaluate and sample a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Shared marginal of every latent coordinate.
    pub marginal: BetaParams,
    pub preprocessor: Preprocessor,
}

impl ModelBundle {
    pub fn new(
        encoder: Encoder,
        decoder: Decoder,
        marginal: BetaParams,
        preprocessor: Preprocessor,
    ) -> Result<Self> {
        let k = decoder.dim();
        if encoder.output_dim() != k || encoder.input_dim() != k {
            return Err(Error::DimensionMismatch {
                what: "encoder dimensions vs decoder",
                expected: k,
                got: encoder.output_dim(),
            });
        }
        if preprocessor.output_dim() != k {
            return Err(Error::DimensionMismatch {
                what: "preprocessor output vs decoder",
                expected: k,
                got: preprocessor.output_dim(),
            });
        }
        Ok(Self {
            encoder,
            decoder,
            marginal,
            preprocessor,
        })
    }

    /// Latent dimension K.
    pub fn dim(&self) -> usize {
        self.decoder.dim()
    }

    /// Dimension of the original observations.
    pub fn input_dim(&self) -> usize {
        self.preprocessor.input_dim()
    }

    /// Log-density of a point given in the preprocessed unit cube.
    pub fn log_density_preprocessed(&self, y: &DVector<f64>) -> Result<LogDensity> {
        latent_log_density(&self.decoder, self.marginal, y)
    }

    /// Log-density in original coordinates. Points that land outside the
    /// unit cube after preprocessing are clamped onto the margin.
    pub fn log_density(&self, u: &DVector<f64>) -> Result<LogDensity> {
        let (y, clamped) = self.preprocessor.apply_clamped(u)?;
        if clamped {
            warn!("input point clamped into the preprocessed support");
        }
        self.log_density_unchecked(&y)
    }

    fn log_density_unchecked(&self, y: &DVector<f64>) -> Result<LogDensity> {
        Ok(match self.log_density_preprocessed(y)? {
            LogDensity::Finite(v) => LogDensity::Finite(v + self.preprocessor.log_det()),
            LogDensity::OutOfSupport => LogDensity::OutOfSupport,
        })
    }

    /// Log-densities of every column of `data` (original coordinates),
    /// split over up to `threads` workers. Output order matches input order
    /// regardless of the thread count.
    pub fn log_density_batch(
        &self,
        data: &DMatrix<f64>,
        threads: usize,
    ) -> Result<Vec<LogDensity>> {
        let pre = self.preprocessor.apply_batch(data)?;
        let n = pre.ncols();
        let threads = threads.clamp(1, n.max(1));
        if threads == 1 {
            return pre
                .column_iter()
                .map(|c| self.log_density_unchecked(&c.into_owned()))
                .collect();
        }
        let chunk = n.div_ceil(threads);
        let pre = &pre;
        let parts: Vec<Result<Vec<LogDensity>>> = thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    s.spawn(move || {
                        (t * chunk..((t + 1) * chunk).min(n))
                            .map(|j| self.log_density_unchecked(&pre.column(j).into_owned()))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("density worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(n);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// `n` samples in the preprocessed cube: independent Beta latents pushed
    /// through the decoder.
    pub fn sample_preprocessed<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Result<DMatrix<f64>> {
        let k = self.dim();
        let mut latents = DMatrix::zeros(k, n);
        for j in 0..n {
            for i in 0..k {
                latents[(i, j)] = beta_sample(self.marginal, rng);
            }
        }
        self.decoder.forward_batch(&latents)
    }

    /// `n` samples in original coordinates.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let y = self.sample_preprocessed(n, rng)?;
        self.preprocessor.invert_batch(&y)
    }
}

/// Differential entropy of Beta(α, β) in nats.
pub fn beta_entropy(params: BetaParams) -> Result<f64> {
    let (a, b) = (params.alpha(), params.beta());
    Ok(
        log_beta(a, b)? - (a - 1.0) * digamma(a)? - (b - 1.0) * digamma(b)?
            + (a + b - 2.0) * digamma(a + b)?,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    /// K · H(marginal).
    pub marginal_entropy_sum: f64,
    /// Mean ln|det ∂f/∂x| over the encoded data.
    pub expected_log_det: f64,
    /// Upper bound on the entropy in preprocessed coordinates (drops the
    /// nonnegative mutual-information term).
    pub observed_entropy_upper_bound: f64,
    /// The same bound carried back to the original coordinates.
    pub original_entropy_upper_bound: f64,
}

/// Entropy decomposition over `data` given in original coordinates.
pub fn entropy_report(model: &ModelBundle, data: &DMatrix<f64>) -> Result<EntropyReport> {
    if data.ncols() == 0 {
        return Err(Error::Data(
            "entropy report needs at least one example".into(),
        ));
    }
    let marginal_entropy_sum = model.dim() as f64 * beta_entropy(model.marginal)?;
    let pre = model.preprocessor.apply_batch(data)?;
    let latents = model.encoder.forward_batch(&pre)?;
    let log_dets = model.decoder.log_det_jacobian_batch(&latents)?;
    let expected_log_det = log_dets.mean();
    let bound = marginal_entropy_sum + expected_log_det;
    Ok(EntropyReport {
        marginal_entropy_sum,
        expected_log_det,
        observed_entropy_upper_bound: bound,
        original_entropy_upper_bound: bound - model.preprocessor.log_det(),
    })
}

/// Result of rounding latents to {0, 1} and scoring them as Bernoulli
/// variables with p = P(x ≥ 1/2) under the marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliCheck {
    pub p: f64,
    /// −K·H(Bern(p)).
    pub expected: f64,
    /// Mean over examples of Σ_k ln Bern(round(x_k); p).
    pub empirical: f64,
    /// Fraction of rounded latents equal to 1.
    pub ones_fraction: f64,
}

/// Bernoulli approximation of the latent marginals on `data` (original
/// coordinates), encoded with the model's encoder.
pub fn bernoulli_check(model: &ModelBundle, data: &DMatrix<f64>) -> Result<BernoulliCheck> {
    let p = 1.0 - regularized_incomplete_beta(0.5, model.marginal)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Data(format!(
            "Bernoulli parameter {p} is degenerate"
        )));
    }
    let k = model.dim() as f64;
    let expected = k * (p * p.ln() + (1.0 - p) * (-p).ln_1p());
    let pre = model.preprocessor.apply_batch(data)?;
    let latents = model.encoder.forward_batch(&pre)?;
    let n = latents.ncols() as f64;
    let ones = latents.iter().filter(|&&v| v >= 0.5).count() as f64;
    let zeros = latents.len() as f64 - ones;
    let empirical = (ones * p.ln() + zeros * (-p).ln_1p()) / n;
    Ok(BernoulliCheck {
        p,
        expected,
        empirical,
        ones_fraction: ones / latents.len() as f64,
    })
}

/// Moment-matched fit of one latent dimension against the model marginal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimensionFit {
    pub alpha: f64,
    pub beta: f64,
    pub sym_kl: f64,
    /// The moments admitted no Beta fit; the shapes are the clamped ones.
    pub degenerate: bool,
}

/// Per-dimension Beta fits of the encoded `data` (original coordinates).
pub fn marginal_fit_report(model: &ModelBundle, data: &DMatrix<f64>) -> Result<Vec<DimensionFit>> {
    if data.ncols() < 2 {
        return Err(Error::Data(
            "marginal fits need at least two examples".into(),
        ));
    }
    let pre = model.preprocessor.apply_batch(data)?;
    let latents = model.encoder.forward_batch(&pre)?;
    latents
        .row_iter()
        .map(|row| {
            let fit = MomentFit::from_samples(row.iter().copied());
            let params = fit.to_params_clamped();
            Ok(DimensionFit {
                alpha: params.alpha(),
                beta: params.beta(),
                sym_kl: sym_kl(params, model.marginal)?,
                degenerate: fit.is_degenerate(),
            })
        })
        .collect()
}

/// Aggregate of a batch of log-densities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensitySummary {
    pub count: usize,
    pub out_of_support: usize,
    /// Mean over in-support points; NaN when there are none.
    pub mean_in_support: f64,
}

impl DensitySummary {
    pub fn of(values: &[LogDensity]) -> Self {
        let finite: Vec<f64> = values.iter().filter_map(|v| v.finite()).collect();
        let mean_in_support = if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        Self {
            count: values.len(),
            out_of_support: values.len() - finite.len(),
            mean_in_support,
        }
    }
}

/// Mean log-density with every value (out-of-support ones included) floored
/// at `floor`, so batches with some zero-density points stay comparable.
pub fn floored_mean(values: &[LogDensity], floor: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().map(|v| v.value().max(floor)).sum::<f64>() / values.len() as f64
}
