//! The training objective C = μ_D·D + μ_I·I + μ_R·R and its analytic
//! gradients with respect to every encoder and decoder parameter.
//!
//! * D (divergence) depends on the encoder only: moment-matched Beta fits of
//!   each latent dimension across the batch and of each example across its
//!   components, compared to the target with the symmetrized KL divergence.
//! * I (invertibility) depends on the decoder only: mean log condition number
//!   of the decoder weight matrices.
//! * R (reconstruction) is the observed-space squared error of f(g(ỹ)) against
//!   the clean y, where ỹ is the (optionally corrupted) encoder input.
//!
//! An optional hinged foreign-example term pushes the exact model density of
//! other classes' points below a margin; it touches the decoder only.
//!
//! The encoder threshold and the sample clamp used by the Beta fits are both
//! treated as the identity on the backward pass.

use nalgebra::{DMatrix, DVector};

use crate::beta::{sym_kl, sym_kl_grad, BetaParams, MomentFit};
use crate::error::{Error, FitLocation, Result};
use crate::network::{
    backprop, condition_penalty, condition_penalty_with_grad, Decoder, Encoder, LayerGradient,
};

/// Relative weights of the three penalties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyWeights {
    pub divergence: f64,
    pub invertibility: f64,
    pub reconstruction: f64,
}

impl PenaltyWeights {
    pub fn new(divergence: f64, invertibility: f64, reconstruction: f64) -> Result<Self> {
        let all = [divergence, invertibility, reconstruction];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "penalty weights must be finite and nonnegative, got {all:?}"
            )));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(
                "at least one penalty weight must be positive".into(),
            ));
        }
        Ok(Self {
            divergence,
            invertibility,
            reconstruction,
        })
    }

    pub fn uniform() -> Self {
        Self {
            divergence: 1.0,
            invertibility: 1.0,
            reconstruction: 1.0,
        }
    }
}

/// Values of every term at one parameter setting.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    pub divergence: f64,
    pub invertibility: f64,
    pub reconstruction: f64,
    /// Hinged foreign-example density, zero when no foreign term is active.
    pub foreign: f64,
    /// μ_D·D + μ_I·I + μ_R·R, plus the weighted foreign term if present.
    pub total: f64,
    pub per_dimension_divergences: Vec<f64>,
    pub per_example_divergence_mean: f64,
}

/// What to do when a Beta fit is degenerate (zero variance, or variance at
/// or above μ(1−μ)).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegeneratePolicy {
    /// Report a [`Error::DegenerateFit`].
    Fail,
    /// Score the fit at the clamped shapes and pass no gradient through it.
    Clamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceBreakdown {
    pub total: f64,
    pub per_dimension: Vec<f64>,
    pub per_example_mean: f64,
}

/// Gradient with respect to every layer of both stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGradient {
    pub encoder: Vec<LayerGradient>,
    pub decoder: Vec<LayerGradient>,
}

impl NetworkGradient {
    pub fn zeros(encoder: &Encoder, decoder: &Decoder) -> Self {
        Self {
            encoder: encoder
                .layers()
                .iter()
                .map(LayerGradient::zeros_like)
                .collect(),
            decoder: decoder
                .layers()
                .iter()
                .map(LayerGradient::zeros_like)
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.encoder
            .iter()
            .chain(self.decoder.iter())
            .map(LayerGradient::norm_squared)
            .sum::<f64>()
            .sqrt()
    }

    pub fn add_scaled(&mut self, other: &NetworkGradient, scale: f64) {
        for (a, b) in self.encoder.iter_mut().zip(&other.encoder) {
            a.add_scaled(b, scale);
        }
        for (a, b) in self.decoder.iter_mut().zip(&other.decoder) {
            a.add_scaled(b, scale);
        }
    }
}

/// Per-term gradients, kept separate so the trainer can balance the weights
/// by gradient magnitude.
#[derive(Debug, Clone)]
pub struct TermGradients {
    pub divergence: NetworkGradient,
    pub invertibility: NetworkGradient,
    pub reconstruction: NetworkGradient,
    pub foreign: NetworkGradient,
}

impl TermGradients {
    pub fn combine(&self, weights: PenaltyWeights, foreign_weight: f64) -> NetworkGradient {
        let mut total = self.divergence.clone();
        for g in total.encoder.iter_mut().chain(total.decoder.iter_mut()) {
            g.weights *= weights.divergence;
            g.bias *= weights.divergence;
        }
        total.add_scaled(&self.invertibility, weights.invertibility);
        total.add_scaled(&self.reconstruction, weights.reconstruction);
        if foreign_weight != 0.0 {
            total.add_scaled(&self.foreign, foreign_weight);
        }
        total
    }
}

/// Hinged penalty on the exact log-density the decoder assigns to points
/// from other classes: mean over points of max(0, log p(y) − margin).
#[derive(Debug, Clone, Copy)]
pub struct ForeignPenalty<'a> {
    /// Preprocessed foreign points, one per column.
    pub points: &'a DMatrix<f64>,
    pub marginal: BetaParams,
    pub margin: f64,
    pub weight: f64,
}

/// Everything needed to evaluate the objective on one minibatch.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    /// Clean observed batch, one example per column.
    pub clean: &'a DMatrix<f64>,
    /// Encoder input on the reconstruction path; `None` means the clean batch.
    pub corrupted: Option<&'a DMatrix<f64>>,
    pub target: BetaParams,
    pub weights: PenaltyWeights,
    /// Include the per-example divergence (needs at least two latent dims).
    pub example_divergence: bool,
    pub policy: DegeneratePolicy,
    pub foreign: Option<ForeignPenalty<'a>>,
}

impl<'a> Objective<'a> {
    pub fn new(clean: &'a DMatrix<f64>, target: BetaParams, weights: PenaltyWeights) -> Self {
        Self {
            clean,
            corrupted: None,
            target,
            weights,
            example_divergence: clean.nrows() >= 2,
            policy: DegeneratePolicy::Fail,
            foreign: None,
        }
    }

    fn encoder_input(&self) -> &DMatrix<f64> {
        self.corrupted.unwrap_or(self.clean)
    }

    fn check(&self, encoder: &Encoder, decoder: &Decoder) -> Result<()> {
        let k = decoder.dim();
        if encoder.output_dim() != k {
            return Err(Error::DimensionMismatch {
                what: "encoder output vs decoder dimension",
                expected: k,
                got: encoder.output_dim(),
            });
        }
        for (what, m) in [
            ("clean batch", self.clean),
            ("encoder input", self.encoder_input()),
        ] {
            if m.nrows() != k {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: k,
                    got: m.nrows(),
                });
            }
        }
        if let Some(c) = self.corrupted {
            if c.ncols() != self.clean.ncols() {
                return Err(Error::DimensionMismatch {
                    what: "corrupted batch size",
                    expected: self.clean.ncols(),
                    got: c.ncols(),
                });
            }
        }
        Ok(())
    }

    fn assemble(
        &self,
        div: DivergenceBreakdown,
        invertibility: f64,
        reconstruction: f64,
        foreign: f64,
    ) -> ObjectiveReport {
        let w = self.weights;
        let mut total = w.divergence * div.total
            + w.invertibility * invertibility
            + w.reconstruction * reconstruction;
        if let Some(f) = &self.foreign {
            total += f.weight * foreign;
        }
        ObjectiveReport {
            divergence: div.total,
            invertibility,
            reconstruction,
            foreign,
            total,
            per_dimension_divergences: div.per_dimension,
            per_example_divergence_mean: div.per_example_mean,
        }
    }

    pub fn evaluate(&self, encoder: &Encoder, decoder: &Decoder) -> Result<ObjectiveReport> {
        self.check(encoder, decoder)?;
        let latents = encoder.forward_batch(self.clean)?;
        let (div, _) = divergence_terms(
            &latents,
            self.target,
            self.example_divergence,
            self.policy,
            false,
        )?;
        let invertibility = condition_penalty(decoder);
        let reconstruction = if self.corrupted.is_none() {
            reconstruction_from_latents(&latents, self.clean, decoder)?
        } else {
            reconstruction_loss(self.encoder_input(), self.clean, encoder, decoder)?
        };
        let foreign = match &self.foreign {
            Some(f) => foreign_terms(f, decoder, false)?.0,
            None => 0.0,
        };
        Ok(self.assemble(div, invertibility, reconstruction, foreign))
    }

    /// Report plus exact per-term gradients.
    pub fn gradients(
        &self,
        encoder: &Encoder,
        decoder: &Decoder,
    ) -> Result<(ObjectiveReport, TermGradients)> {
        self.check(encoder, decoder)?;
        let zeros = NetworkGradient::zeros(encoder, decoder);

        // Divergence: clean encodings only.
        let clean_trace = encoder.trace(self.clean)?;
        let latents = encoder.apply_threshold(clean_trace.last_output());
        let (div, div_grad) = divergence_terms(
            &latents,
            self.target,
            self.example_divergence,
            self.policy,
            true,
        )?;
        let (enc_div, _) = backprop(encoder.layers(), &clean_trace, div_grad.expect("requested"));
        let mut divergence = zeros.clone();
        divergence.encoder = enc_div;

        // Invertibility: decoder weights only.
        let (invertibility, cond_grads) = condition_penalty_with_grad(decoder);
        let mut inv_grad = zeros.clone();
        for (g, w) in inv_grad.decoder.iter_mut().zip(cond_grads) {
            g.weights = w;
        }

        // Reconstruction through f(g(ỹ)).
        let noisy_trace;
        let (rec_trace, rec_latents) = match self.corrupted {
            None => (&clean_trace, latents),
            Some(input) => {
                noisy_trace = encoder.trace(input)?;
                let l = encoder.apply_threshold(noisy_trace.last_output());
                (&noisy_trace, l)
            }
        };
        let dec_trace = decoder.trace(&rec_latents)?;
        let n = self.clean.ncols() as f64;
        let residual = dec_trace.last_output() - self.clean;
        let reconstruction = residual.norm_squared() / n;
        let (dec_rec, grad_latent) = backprop(decoder.layers(), &dec_trace, residual * (2.0 / n));
        let (enc_rec, _) = backprop(encoder.layers(), rec_trace, grad_latent);
        let rec_grad = NetworkGradient {
            encoder: enc_rec,
            decoder: dec_rec,
        };

        let mut foreign_grad = zeros;
        let foreign = match &self.foreign {
            Some(f) => {
                let (value, grads) = foreign_terms(f, decoder, true)?;
                foreign_grad.decoder = grads.expect("requested");
                value
            }
            None => 0.0,
        };

        let report = self.assemble(div, invertibility, reconstruction, foreign);
        Ok((
            report,
            TermGradients {
                divergence,
                invertibility: inv_grad,
                reconstruction: rec_grad,
                foreign: foreign_grad,
            },
        ))
    }
}

/// Per-fit value and the gradient of the symmetrized KL with respect to each
/// sample, given the fit's moments.
fn fit_term(
    samples: impl Iterator<Item = f64> + Clone,
    target: BetaParams,
    policy: DegeneratePolicy,
    location: FitLocation,
    want_grad: bool,
) -> Result<(f64, Option<(f64, f64, f64)>)> {
    let fit = MomentFit::from_samples(samples);
    let params = if fit.is_degenerate() {
        match policy {
            DegeneratePolicy::Fail => return Err(fit.to_params().unwrap_err().at(location)),
            DegeneratePolicy::Clamp => fit.to_params_clamped(),
        }
    } else {
        fit.to_params_clamped()
    };
    let value = sym_kl(params, target)?;
    if !want_grad {
        return Ok((value, None));
    }
    let partials = fit.partials();
    let (ga, gb) = sym_kl_grad(params, target)?;
    let g_mean = ga * partials.alpha_mean + gb * partials.beta_mean;
    let g_var = ga * partials.alpha_variance + gb * partials.beta_variance;
    Ok((value, Some((fit.mean, g_mean, g_var))))
}

/// Divergence penalty with optional gradient with respect to the latents.
pub(crate) fn divergence_terms(
    latents: &DMatrix<f64>,
    target: BetaParams,
    example_divergence: bool,
    policy: DegeneratePolicy,
    want_grad: bool,
) -> Result<(DivergenceBreakdown, Option<DMatrix<f64>>)> {
    use crate::beta::SAMPLE_CLAMP;
    let clamp = |x: f64| x.clamp(SAMPLE_CLAMP, 1.0 - SAMPLE_CLAMP);
    let (k, n) = latents.shape();
    if n < 2 {
        return Err(Error::Data(format!(
            "divergence needs at least 2 examples, got {n}"
        )));
    }
    let mut grad = want_grad.then(|| DMatrix::zeros(k, n));

    let mut per_dimension = Vec::with_capacity(k);
    for d in 0..k {
        let row = latents.row(d);
        let (value, g) = fit_term(
            row.iter().copied(),
            target,
            policy,
            FitLocation::Dimension(d),
            want_grad,
        )?;
        per_dimension.push(value);
        if let (Some(grad), Some((mean, g_mean, g_var))) = (grad.as_mut(), g) {
            let scale = 1.0 / (k as f64 * n as f64);
            for j in 0..n {
                grad[(d, j)] += scale * (g_mean + g_var * 2.0 * (clamp(latents[(d, j)]) - mean));
            }
        }
    }
    let dim_mean = per_dimension.iter().sum::<f64>() / k as f64;

    let mut per_example_mean = 0.0;
    if example_divergence {
        if k < 2 {
            return Err(Error::Data(
                "per-example divergence needs at least 2 latent dimensions".into(),
            ));
        }
        for j in 0..n {
            let col = latents.column(j);
            let (value, g) = fit_term(
                col.iter().copied(),
                target,
                policy,
                FitLocation::Example(j),
                want_grad,
            )?;
            per_example_mean += value;
            if let (Some(grad), Some((mean, g_mean, g_var))) = (grad.as_mut(), g) {
                let scale = 1.0 / (k as f64 * n as f64);
                for d in 0..k {
                    grad[(d, j)] +=
                        scale * (g_mean + g_var * 2.0 * (clamp(latents[(d, j)]) - mean));
                }
            }
        }
        per_example_mean /= n as f64;
    }

    Ok((
        DivergenceBreakdown {
            total: dim_mean + per_example_mean,
            per_dimension,
            per_example_mean,
        },
        grad,
    ))
}

/// D for a K×N matrix of latents (one example per column): mean per-dimension
/// symmetrized KL plus mean per-example symmetrized KL against `target`.
pub fn divergence_penalty(
    latents: &DMatrix<f64>,
    target: BetaParams,
) -> Result<DivergenceBreakdown> {
    if latents.nrows() < 2 {
        return Err(Error::Data(format!(
            "divergence needs at least 2 latent dimensions, got {}",
            latents.nrows()
        )));
    }
    Ok(divergence_terms(latents, target, true, DegeneratePolicy::Fail, false)?.0)
}

fn reconstruction_from_latents(
    latents: &DMatrix<f64>,
    clean: &DMatrix<f64>,
    decoder: &Decoder,
) -> Result<f64> {
    let recon = decoder.forward_batch(latents)?;
    Ok((recon - clean).norm_squared() / clean.ncols() as f64)
}

/// Mean over examples of ‖f(g(input_n)) − target_n‖².
pub fn reconstruction_loss(
    input: &DMatrix<f64>,
    target: &DMatrix<f64>,
    encoder: &Encoder,
    decoder: &Decoder,
) -> Result<f64> {
    if input.ncols() != target.ncols() || target.nrows() != decoder.dim() {
        return Err(Error::DimensionMismatch {
            what: "reconstruction target",
            expected: input.ncols(),
            got: target.ncols(),
        });
    }
    let latents = encoder.forward_batch(input)?;
    reconstruction_from_latents(&latents, target, decoder)
}

/// Unweighted objective terms on a clean batch, combined with `weights`.
pub fn total_objective(
    batch: &DMatrix<f64>,
    encoder: &Encoder,
    decoder: &Decoder,
    target: BetaParams,
    weights: PenaltyWeights,
) -> Result<ObjectiveReport> {
    Objective::new(batch, target, weights).evaluate(encoder, decoder)
}

/// Gradient of [`total_objective`] over all parameters of both stacks.
pub fn objective_gradients(
    batch: &DMatrix<f64>,
    encoder: &Encoder,
    decoder: &Decoder,
    target: BetaParams,
    weights: PenaltyWeights,
) -> Result<NetworkGradient> {
    let (_, terms) = Objective::new(batch, target, weights).gradients(encoder, decoder)?;
    Ok(terms.combine(weights, 0.0))
}

/// Exact log-density of one preprocessed point through the decoder inverse,
/// with its gradient with respect to every decoder layer. `None` when the
/// point is outside the model's support.
fn log_density_with_grad(
    decoder: &Decoder,
    marginal: BetaParams,
    y: &DVector<f64>,
    transposed: &[nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>],
    inverse_transposed: &[DMatrix<f64>],
    want_grad: bool,
) -> Result<Option<(f64, Option<Vec<LayerGradient>>)>> {
    let states = match decoder.inverse_trace(y) {
        Ok(s) => s,
        Err(Error::Domain { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let x = &states[0];
    if x.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
        return Ok(None);
    }
    let (a, b) = (marginal.alpha(), marginal.beta());
    let mut value = 0.0;
    for &v in x.iter() {
        value += crate::special::beta_log_pdf(v, marginal)?;
    }
    let depth = decoder.depth();
    for m in 0..depth {
        value -= decoder.log_abs_det(m)?;
        value -= states[m + 1]
            .iter()
            .map(|&s| s.ln() + (-s).ln_1p())
            .sum::<f64>();
    }
    if !want_grad {
        return Ok(Some((value, None)));
    }
    let layers = decoder.layers();
    let mut grads: Vec<LayerGradient> = layers.iter().map(LayerGradient::zeros_like).collect();
    let mut upstream = x.map(|v| (a - 1.0) / v - (b - 1.0) / (1.0 - v));
    for m in 0..depth {
        let g_u = transposed[m]
            .solve(&upstream)
            .ok_or(Error::SingularLayer { layer: m })?;
        grads[m].bias = -&g_u;
        grads[m].weights = -(&g_u * states[m].transpose()) - &inverse_transposed[m];
        if m + 1 < depth {
            let s = &states[m + 1];
            upstream = DVector::from_fn(s.len(), |k, _| {
                let v = s[k];
                let w = v * (1.0 - v);
                g_u[k] / w - (1.0 - 2.0 * v) / w
            });
        }
    }
    Ok(Some((value, Some(grads))))
}

fn foreign_terms(
    foreign: &ForeignPenalty<'_>,
    decoder: &Decoder,
    want_grad: bool,
) -> Result<(f64, Option<Vec<LayerGradient>>)> {
    let n = foreign.points.ncols();
    if n == 0 {
        return Ok((
            0.0,
            want_grad.then(|| {
                decoder
                    .layers()
                    .iter()
                    .map(LayerGradient::zeros_like)
                    .collect()
            }),
        ));
    }
    // The log-det gradient needs Ω^{-T} itself; the per-point backward
    // solves reuse one factorization of Ωᵀ per layer.
    let (transposed, inverse_transposed): (Vec<_>, Vec<_>) = if want_grad {
        decoder
            .layers()
            .iter()
            .enumerate()
            .map(|(m, l)| {
                let lu = l.weights.transpose().lu();
                let k = l.weights.nrows();
                let inv = lu
                    .solve(&DMatrix::identity(k, k))
                    .ok_or(Error::SingularLayer { layer: m })?;
                Ok((lu, inv))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip()
    } else {
        (Vec::new(), Vec::new())
    };
    let mut total = 0.0;
    let mut grads: Option<Vec<LayerGradient>> = want_grad.then(|| {
        decoder
            .layers()
            .iter()
            .map(LayerGradient::zeros_like)
            .collect()
    });
    for col in foreign.points.column_iter() {
        let y = col.into_owned();
        let Some((value, g)) = log_density_with_grad(
            decoder,
            foreign.marginal,
            &y,
            &transposed,
            &inverse_transposed,
            want_grad,
        )?
        else {
            continue;
        };
        let excess = value - foreign.margin;
        if excess > 0.0 {
            total += excess;
            if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.add_scaled(b, 1.0 / n as f64);
                }
            }
        }
    }
    Ok((total / n as f64, grads))
}
