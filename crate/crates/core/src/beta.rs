//! Beta-distribution fitting, symmetrized divergences and the annealed
//! target schedule.

use crate::error::{Error, FitLocation, Result};
use crate::special::{digamma, trigamma};

/// Samples are pulled into this closed range before moments are taken, so
/// exact zeros from the threshold encoder land on the support edge.
pub const SAMPLE_CLAMP: f64 = 1e-6;
/// Fitted shapes are clamped into `[MIN_SHAPE, MAX_SHAPE]`.
pub const MIN_SHAPE: f64 = 1e-4;
pub const MAX_SHAPE: f64 = 1e6;

/// Shape parameters (α, β) of a Beta distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaParams {
    alpha: f64,
    beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "Beta shape {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }
}

/// Sample mean and (biased) variance of a set of values in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentFit {
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
}

/// Partial derivatives of the fitted shapes with respect to the moments.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MomentPartials {
    pub alpha_mean: f64,
    pub alpha_variance: f64,
    pub beta_mean: f64,
    pub beta_variance: f64,
}

impl MomentFit {
    /// Moments of `samples` after clamping each into `[1e-6, 1 - 1e-6]`.
    pub fn from_samples<I>(samples: I) -> Self
    where
        I: IntoIterator<Item = f64>,
        I::IntoIter: Clone,
    {
        let iter = samples.into_iter();
        let clamp = |x: f64| x.clamp(SAMPLE_CLAMP, 1.0 - SAMPLE_CLAMP);
        let mut count = 0usize;
        let mut sum = 0.0;
        for x in iter.clone() {
            sum += clamp(x);
            count += 1;
        }
        let mean = sum / count.max(1) as f64;
        let ss: f64 = iter.map(|x| (clamp(x) - mean).powi(2)).sum();
        Self {
            mean,
            variance: ss / count.max(1) as f64,
            count,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.variance > 0.0 && self.variance < self.mean * (1.0 - self.mean))
    }

    /// Unclamped method-of-moments shapes; nonpositive when degenerate.
    fn raw_shapes(&self) -> (f64, f64) {
        let common = self.mean * (1.0 - self.mean) / self.variance - 1.0;
        (self.mean * common, (1.0 - self.mean) * common)
    }

    /// Moment-matched shapes, failing on degenerate variance.
    pub fn to_params(&self) -> Result<BetaParams> {
        if self.count < 2 || self.is_degenerate() {
            return Err(Error::DegenerateFit {
                location: FitLocation::Sample,
                mean: self.mean,
                variance: self.variance,
            });
        }
        Ok(self.to_params_clamped())
    }

    /// Moment-matched shapes with every failure mode mapped onto the shape
    /// clamps. Zero variance pushes both shapes to the upper clamp; variance
    /// at or above μ(1-μ) pushes them to the lower clamp.
    pub fn to_params_clamped(&self) -> BetaParams {
        let (a, b) = if self.variance <= 0.0 {
            (MAX_SHAPE, MAX_SHAPE)
        } else {
            self.raw_shapes()
        };
        let fix = |v: f64| {
            if v.is_nan() {
                MIN_SHAPE
            } else {
                v.clamp(MIN_SHAPE, MAX_SHAPE)
            }
        };
        BetaParams {
            alpha: fix(a),
            beta: fix(b),
        }
    }

    /// ∂(α̂, β̂)/∂(μ̂, σ̂²); zero for any shape sitting on a clamp.
    pub fn partials(&self) -> MomentPartials {
        if self.is_degenerate() {
            return MomentPartials::default();
        }
        let (m, v) = (self.mean, self.variance);
        let common = m * (1.0 - m) / v - 1.0;
        let dc_dm = (1.0 - 2.0 * m) / v;
        let dc_dv = -m * (1.0 - m) / (v * v);
        let (a, b) = self.raw_shapes();
        let active = |s: f64| (MIN_SHAPE..=MAX_SHAPE).contains(&s);
        let mut p = MomentPartials::default();
        if active(a) {
            p.alpha_mean = common + m * dc_dm;
            p.alpha_variance = m * dc_dv;
        }
        if active(b) {
            p.beta_mean = -common + (1.0 - m) * dc_dm;
            p.beta_variance = (1.0 - m) * dc_dv;
        }
        p
    }
}

/// Method-of-moments Beta fit to `samples`.
pub fn moment_match(samples: &[f64]) -> Result<BetaParams> {
    MomentFit::from_samples(samples.iter().copied()).to_params()
}

/// Closed-form symmetrized KL divergence KL(p‖q) + KL(q‖p) between two Betas.
pub fn sym_kl(p: BetaParams, q: BetaParams) -> Result<f64> {
    let (a1, b1, a2, b2) = (p.alpha, p.beta, q.alpha, q.beta);
    let da = a1 - a2;
    let db = b1 - b2;
    Ok(
        da * (digamma(a1)? - digamma(a2)?) + db * (digamma(b1)? - digamma(b2)?)
            - (da + db) * (digamma(a1 + b1)? - digamma(a2 + b2)?),
    )
}

/// Partial derivatives of [`sym_kl`] with respect to the first argument's
/// (α, β).
pub fn sym_kl_grad(p: BetaParams, q: BetaParams) -> Result<(f64, f64)> {
    let (a1, b1, a2, b2) = (p.alpha, p.beta, q.alpha, q.beta);
    let s1 = a1 + b1;
    let s2 = a2 + b2;
    let shared = digamma(s1)? - digamma(s2)? + (s1 - s2) * trigamma(s1)?;
    let d_alpha = digamma(a1)? - digamma(a2)? + (a1 - a2) * trigamma(a1)? - shared;
    let d_beta = digamma(b1)? - digamma(b2)? + (b1 - b2) * trigamma(b1)? - shared;
    Ok((d_alpha, d_beta))
}

/// Sequence of Beta targets with constant mean, annealed geometrically in α
/// from an easy initial target to the final one.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSchedule {
    initial: BetaParams,
    final_target: BetaParams,
    advance_tolerance: f64,
    interpolation_steps: usize,
    current_index: usize,
}

impl TargetSchedule {
    pub fn new(
        initial: BetaParams,
        final_target: BetaParams,
        advance_tolerance: f64,
        interpolation_steps: usize,
    ) -> Result<Self> {
        if !(initial.alpha > 1.0 && initial.beta > 1.0) {
            return Err(Error::Config(format!(
                "initial target shapes must both exceed 1, got ({}, {})",
                initial.alpha, initial.beta
            )));
        }
        if (initial.mean() - final_target.mean()).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "initial target mean {} differs from final target mean {}",
                initial.mean(),
                final_target.mean()
            )));
        }
        if !(advance_tolerance > 0.0 && advance_tolerance.is_finite()) {
            return Err(Error::Config(format!(
                "advance_tolerance must be positive, got {advance_tolerance}"
            )));
        }
        if interpolation_steps == 0 {
            return Err(Error::Config(
                "interpolation_steps must be at least 1".into(),
            ));
        }
        Ok(Self {
            initial,
            final_target,
            advance_tolerance,
            interpolation_steps,
            current_index: 0,
        })
    }

    /// Builds a schedule whose initial β is derived from `initial_alpha` so
    /// the mean matches the final target exactly.
    pub fn with_constant_mean(
        final_target: BetaParams,
        initial_alpha: f64,
        advance_tolerance: f64,
        interpolation_steps: usize,
    ) -> Result<Self> {
        let ratio = final_target.beta / final_target.alpha;
        let initial = BetaParams::new(initial_alpha, initial_alpha * ratio)?;
        Self::new(
            initial,
            final_target,
            advance_tolerance,
            interpolation_steps,
        )
    }

    pub fn initial(&self) -> BetaParams {
        self.initial
    }

    pub fn final_target(&self) -> BetaParams {
        self.final_target
    }

    pub fn advance_tolerance(&self) -> f64 {
        self.advance_tolerance
    }

    pub fn interpolation_steps(&self) -> usize {
        self.interpolation_steps
    }

    pub fn current_index(&self) -> usize {
        self.current_index
    }

    pub fn is_exhausted(&self) -> bool {
        self.current_index >= self.interpolation_steps
    }

    pub fn mean(&self) -> f64 {
        self.final_target.mean()
    }

    /// The target at step `j` of the path (clamped to the final target).
    pub fn target_at(&self, j: usize) -> BetaParams {
        if j == 0 {
            return self.initial;
        }
        if j >= self.interpolation_steps {
            return self.final_target;
        }
        let frac = j as f64 / self.interpolation_steps as f64;
        let alpha = self.initial.alpha * (self.final_target.alpha / self.initial.alpha).powf(frac);
        let ratio = self.final_target.beta / self.final_target.alpha;
        BetaParams {
            alpha,
            beta: alpha * ratio,
        }
    }

    pub fn current(&self) -> BetaParams {
        self.target_at(self.current_index)
    }

    /// Advances one step when the current fit is within tolerance; returns the
    /// (possibly new) current target.
    pub fn schedule_next(&mut self, fit_divergence: f64) -> BetaParams {
        if fit_divergence <= self.advance_tolerance && !self.is_exhausted() {
            self.current_index += 1;
        }
        self.current()
    }
}
