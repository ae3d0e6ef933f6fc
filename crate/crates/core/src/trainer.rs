//! Training: orthonormal initialization, greedy layerwise pretraining, and
//! block-coordinate fine-tuning with Armijo line searches, adaptive penalty
//! weights, target annealing, masking noise and sliding-window minibatches.
//!
//! All randomness comes from one seed split into independent ChaCha
//! streams (initialization, training, foreign-example sampling), so a run is
//! bit-reproducible and enabling or disabling one consumer never perturbs
//! the others.

use std::fmt;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::beta::{BetaParams, TargetSchedule};
use crate::data::{format_f64, Preprocessor};
use crate::density::{latent_log_density, ModelBundle};
use crate::error::{Error, Result};
use crate::network::{Decoder, Encoder, Layer};
use crate::objective::{
    DegeneratePolicy, ForeignPenalty, NetworkGradient, Objective, ObjectiveReport, PenaltyWeights,
};

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const FOREIGN_STREAM: u64 = 2;

/// Smallest latent dimension at which the per-example divergence is on by
/// default.
pub const AUTO_EXAMPLE_DIVERGENCE_DIM: usize = 8;

/// Backtracking line-search settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoConfig {
    /// Sufficient-decrease constant c.
    pub c: f64,
    /// Step shrink factor per rejection.
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// First trial step of every block; later trials start at twice the
    /// block's previous accepted step.
    pub initial_step: f64,
}

impl Default for ArmijoConfig {
    fn default() -> Self {
        Self {
            c: 1e-4,
            backtrack: 0.5,
            max_backtracks: 30,
            initial_step: 1.0,
        }
    }
}

/// Target ratios r_D : r_I : r_R of weighted gradient magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightRatios {
    pub divergence: f64,
    pub invertibility: f64,
    pub reconstruction: f64,
}

impl Default for WeightRatios {
    fn default() -> Self {
        Self {
            divergence: 1.0,
            invertibility: 0.1,
            reconstruction: 1.0,
        }
    }
}

/// One trainable unit of block-coordinate descent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    Encoder(usize),
    Decoder(usize),
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Encoder(j) => write!(f, "encoder[{j}]"),
            Block::Decoder(m) => write!(f, "decoder[{m}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Number of decoder layers M.
    pub decoder_layers: usize,
    /// Encoder layer widths; the last must equal K. Empty means M layers of
    /// width K.
    pub encoder_widths: Vec<usize>,
    pub schedule: TargetSchedule,
    pub noise_rate: f64,
    pub window_size: usize,
    /// `None` means a quarter of the window (at least 1).
    pub window_stride: Option<usize>,
    pub armijo: ArmijoConfig,
    pub ratios: WeightRatios,
    /// Steps between weight adaptations; 0 keeps the weights fixed.
    pub ratio_update_period: usize,
    /// Weights used until the first adaptation. The default leaves the
    /// invertibility term off: the condition-number penalty has a kink at
    /// the orthonormal initialisation, where every direction increases it to
    /// first order, so a positive weight there rejects every decoder step.
    /// Adaptation switches the term on once its gradient is nonzero.
    pub initial_weights: PenaltyWeights,
    pub epochs: usize,
    /// Epochs per level of layerwise pretraining; 0 skips pretraining.
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub epsilon_threshold: f64,
    /// Subtract each layer's mean weighted input on the data sample from its
    /// initial bias, so pre-activations start centred at ln(α₀/β₀). Inputs in
    /// the unit cube have mean near 1/2 in every coordinate; without
    /// centring that common offset grows like √K and saturates the first
    /// layer for all but tiny K. The decoder's last layer is instead centred
    /// at the logit of the per-dimension data mean.
    pub center_init_bias: bool,
    /// Include the per-example divergence term. `None` enables it when the
    /// latent dimension is at least [`AUTO_EXAMPLE_DIVERGENCE_DIM`]: with only
    /// a handful of components per example the per-example Beta fit is
    /// dominated by sampling noise and prevents the per-dimension fits from
    /// converging.
    pub example_divergence: Option<bool>,
    /// Blocks left untouched during fine-tuning.
    pub frozen: Vec<Block>,
}

impl TrainConfig {
    /// Defaults for everything except the target schedule.
    pub fn new(schedule: TargetSchedule) -> Self {
        Self {
            decoder_layers: 2,
            encoder_widths: Vec::new(),
            schedule,
            noise_rate: 0.0,
            window_size: 100,
            window_stride: None,
            armijo: ArmijoConfig::default(),
            ratios: WeightRatios::default(),
            ratio_update_period: 50,
            initial_weights: PenaltyWeights {
                divergence: 1.0,
                invertibility: 0.0,
                reconstruction: 1.0,
            },
            epochs: 30,
            pretrain_epochs: 5,
            seed: 0,
            epsilon_threshold: 0.01,
            center_init_bias: true,
            example_divergence: None,
            frozen: Vec::new(),
        }
    }

    /// Whether the per-example divergence is used at latent dimension `k`.
    pub fn uses_example_divergence(&self, k: usize) -> bool {
        k >= 2
            && self
                .example_divergence
                .unwrap_or(k >= AUTO_EXAMPLE_DIVERGENCE_DIM)
    }

    pub fn stride(&self) -> usize {
        self.window_stride.unwrap_or((self.window_size / 4).max(1))
    }

    /// Encoder widths for latent dimension `k`.
    pub fn widths(&self, k: usize) -> Vec<usize> {
        if self.encoder_widths.is_empty() {
            vec![k; self.decoder_layers]
        } else {
            self.encoder_widths.clone()
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.decoder_layers == 0 {
            return bad("decoder_layers must be at least 1".into());
        }
        let widths = self.widths(k);
        if widths.contains(&0) {
            return bad("encoder widths must be positive".into());
        }
        if widths.last() != Some(&k) {
            return bad(format!(
                "last encoder width must equal the latent dimension {k}"
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!(
                "noise_rate must lie in [0, 1), got {}",
                self.noise_rate
            ));
        }
        if self.window_size == 0 || self.stride() == 0 || self.stride() > self.window_size {
            return bad(format!(
                "need 0 < window_stride ≤ window_size, got stride {} and window {}",
                self.stride(),
                self.window_size
            ));
        }
        let a = &self.armijo;
        if !(a.c > 0.0 && a.c < 1.0) || !(a.backtrack > 0.0 && a.backtrack < 1.0) {
            return bad("armijo_c and armijo_backtrack must lie in (0, 1)".into());
        }
        if !(a.initial_step > 0.0 && a.initial_step.is_finite()) {
            return bad("initial step must be positive".into());
        }
        let r = &self.ratios;
        if !(r.divergence >= 0.0 && r.invertibility >= 0.0 && r.reconstruction > 0.0) {
            return bad("ratios must be nonnegative with a positive reconstruction ratio".into());
        }
        if !(0.0..0.5).contains(&self.epsilon_threshold) {
            return bad(format!(
                "epsilon_threshold must lie in [0, 0.5), got {}",
                self.epsilon_threshold
            ));
        }
        Ok(())
    }
}

/// Other classes' examples to push density away from.
#[derive(Debug, Clone, Copy)]
pub struct ForeignConfig<'a> {
    /// Preprocessed points, one per column.
    pub points: &'a DMatrix<f64>,
    pub weight: f64,
    /// Hinge margin on log-density; `None` re-derives it from the own-class
    /// density (mean − 2 sd) at the start of every fine-tuning epoch, leaving
    /// the penalty inactive in epochs where that density has no support.
    pub margin: Option<f64>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub report: ObjectiveReport,
    /// Mean per-dimension symmetrized KL against the current target.
    pub fit_divergence: f64,
    pub target: BetaParams,
    pub weights: PenaltyWeights,
    pub accepted: usize,
    pub rejected: usize,
    pub mean_step: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str =
        "phase\tepoch\tD\tI\tR\tF\tC\tfit\talpha\tbeta\tmu_D\tmu_I\tmu_R\taccepted\trejected\tmean_step";
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.report;
        let reals = [
            r.divergence,
            r.invertibility,
            r.reconstruction,
            r.foreign,
            r.total,
            self.fit_divergence,
            self.target.alpha(),
            self.target.beta(),
            self.weights.divergence,
            self.weights.invertibility,
            self.weights.reconstruction,
        ];
        write!(f, "{}\t{}", self.phase, self.epoch)?;
        for v in reals {
            write!(f, "\t{}", format_f64(v))?;
        }
        write!(
            f,
            "\t{}\t{}\t{}",
            self.accepted,
            self.rejected,
            format_f64(self.mean_step)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub schedule: TargetSchedule,
    pub weights: PenaltyWeights,
    pub step_count: usize,
    /// Full-training-set report at the end of every epoch.
    pub objective_history: Vec<ObjectiveReport>,
    pub log: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(
        encoder: Encoder,
        decoder: Decoder,
        schedule: TargetSchedule,
        weights: PenaltyWeights,
    ) -> Self {
        Self {
            encoder,
            decoder,
            schedule,
            weights,
            step_count: 0,
            objective_history: Vec::new(),
            log: Vec::new(),
        }
    }

    pub fn current_target(&self) -> BetaParams {
        self.schedule.current()
    }

    /// Packages the trained networks as a density model whose marginal is
    /// the schedule's final target.
    pub fn into_model(self, preprocessor: Preprocessor) -> Result<ModelBundle> {
        if !self.schedule.is_exhausted() {
            warn!(
                "target schedule stopped at step {} of {}; densities still use the final target",
                self.schedule.current_index(),
                self.schedule.interpolation_steps()
            );
        }
        ModelBundle::new(
            self.encoder,
            self.decoder,
            self.schedule.final_target(),
            preprocessor,
        )
    }

    /// The training log as tab-separated text with a header line.
    pub fn log_text(&self) -> String {
        let mut s = String::from(EpochRecord::HEADER);
        s.push('\n');
        for r in &self.log {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }
}

/// The training-stream generators derived from a seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------------------
// Initialization

/// Random `rows × cols` matrix with orthonormal rows or columns: the
/// leading block of Q from the QR factorization of a square standard-normal
/// matrix, with column signs fixed so R has a positive diagonal.
pub fn random_orthonormal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let n = rows.max(cols);
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q.view((0, 0), (rows, cols)).into_owned()
}

/// Bisects for the scale at which the increasing function `var` reaches
/// `target` within 10%; falls back to 1 when it cannot.
fn calibrate<F: Fn(f64) -> f64>(var: F, target: f64) -> f64 {
    let close = |v: f64| (v - target).abs() <= 0.1 * target;
    let mut hi = 1.0;
    while var(hi) < target && hi < 1e6 {
        hi *= 2.0;
    }
    if var(hi) < target {
        warn!(
            "initial weight scale calibration failed to bracket the target variance; using scale 1"
        );
        return 1.0;
    }
    let mut lo = 0.0;
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if var(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    if close(var(s)) {
        s
    } else {
        warn!("initial weight scale calibration did not converge; using scale 1");
        1.0
    }
}

/// Mean over rows of the per-row variance across columns.
fn mean_row_variance(m: &DMatrix<f64>) -> f64 {
    let n = m.ncols() as f64;
    let total: f64 = m
        .row_iter()
        .map(|row| {
            let mean = row.sum() / n;
            row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
        })
        .sum();
    total / m.nrows() as f64
}

/// Builds one stack of layers from orthonormal factors scaled by `scale`,
/// feeding `input` forward. With `centring`, each layer's bias is shifted so
/// its mean pre-activation on the input equals the corresponding entry of
/// `centres(layer index)`; otherwise the bias is `bias` everywhere.
fn build_stack(
    factors: &[DMatrix<f64>],
    scale: f64,
    bias: f64,
    input: &DMatrix<f64>,
    centre: Option<&dyn Fn(usize, usize) -> DVector<f64>>,
) -> Result<(Vec<Layer>, DMatrix<f64>)> {
    let mut h = input.clone();
    let mut layers = Vec::with_capacity(factors.len());
    for (i, q) in factors.iter().enumerate() {
        let weights = q * scale;
        let b = match centre {
            Some(c) => c(i, weights.nrows()) - &weights * h.column_mean(),
            None => DVector::from_element(weights.nrows(), bias),
        };
        let layer = Layer::new(weights, b)?;
        h = layer.forward(&h);
        layers.push(layer);
    }
    Ok((layers, h))
}

/// Scaled random orthonormal weights and biases ln(α₀/β₀). The encoder scale
/// is calibrated on `data` (preprocessed, one example per column) so the
/// first layer's output variance matches the initial target's. With
/// `center_init_bias`, biases are centred as documented on that field and
/// the decoder gets its own scale, calibrated so its output variance on the
/// initial latents matches the data's.
pub fn init_params(config: &TrainConfig, data: &DMatrix<f64>) -> Result<(Encoder, Decoder)> {
    let k = data.nrows();
    if data.ncols() == 0 {
        return Err(Error::Data(
            "initialization needs a nonempty data sample".into(),
        ));
    }
    config.validate(k)?;
    let mut rng = stream_rng(config.seed, INIT_STREAM);
    let target = config.schedule.initial();
    let bias = (target.alpha() / target.beta()).ln();
    let widths = config.widths(k);
    let mut input = k;
    let mut enc_q = Vec::with_capacity(widths.len());
    for &w in &widths {
        enc_q.push(random_orthonormal(w, input, &mut rng));
        input = w;
    }
    let dec_q: Vec<_> = (0..config.decoder_layers)
        .map(|_| random_orthonormal(k, k, &mut rng))
        .collect();

    let (encoder_layers, decoder_layers) = if config.center_init_bias {
        let hidden = |_: usize, rows: usize| DVector::from_element(rows, bias);
        let first = std::slice::from_ref(&enc_q[0]);
        let enc_scale = calibrate(
            |s| {
                build_stack(first, s, bias, data, Some(&hidden))
                    .map_or(0.0, |(_, h)| mean_row_variance(&h))
            },
            target.variance(),
        );
        let (encoder_layers, latents) = build_stack(&enc_q, enc_scale, bias, data, Some(&hidden))?;
        // The decoder's last layer is centred on the data itself, so that its
        // outputs start where the data lies rather than at the target mean.
        let data_logits = data.column_mean().map(|m| (m / (1.0 - m)).ln());
        let last = dec_q.len() - 1;
        let decoder_centre = |i: usize, rows: usize| {
            if i == last {
                data_logits.clone()
            } else {
                DVector::from_element(rows, bias)
            }
        };
        let dec_scale = calibrate(
            |s| {
                build_stack(&dec_q, s, bias, &latents, Some(&decoder_centre))
                    .map_or(0.0, |(_, h)| mean_row_variance(&h))
            },
            mean_row_variance(data),
        );
        let (decoder_layers, _) =
            build_stack(&dec_q, dec_scale, bias, &latents, Some(&decoder_centre))?;
        (encoder_layers, decoder_layers)
    } else {
        let first = std::slice::from_ref(&enc_q[0]);
        let scale = calibrate(
            |s| build_stack(first, s, bias, data, None).map_or(0.0, |(_, h)| mean_row_variance(&h)),
            target.variance(),
        );
        let (encoder_layers, latents) = build_stack(&enc_q, scale, bias, data, None)?;
        (
            encoder_layers,
            build_stack(&dec_q, scale, bias, &latents, None)?.0,
        )
    };
    let encoder = Encoder::new(encoder_layers, config.epsilon_threshold)?;
    let decoder = Decoder::new(decoder_layers)?;
    Ok((encoder, decoder))
}

// ---------------------------------------------------------------------------
// Optimization primitives

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Accepted,
    /// Zero gradient: nothing to do.
    Stationary,
    /// Every trial failed the sufficient-decrease test.
    Rejected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmijoResult {
    pub params: Vec<f64>,
    /// Accepted step size, 0 unless accepted.
    pub step: f64,
    pub loss: f64,
    pub outcome: StepOutcome,
}

/// Backtracking line search along −g from `initial_step`: accepts the first
/// t with loss(p − t·g) ≤ loss(p) − c·t·‖g‖². Non-finite trial losses count
/// as failures. `current_loss` is loss(p) when already known.
pub fn armijo_step<F>(
    mut loss: F,
    params: &[f64],
    gradient: &[f64],
    initial_step: f64,
    current_loss: Option<f64>,
    config: &ArmijoConfig,
) -> ArmijoResult
where
    F: FnMut(&[f64]) -> f64,
{
    let base = current_loss.unwrap_or_else(|| loss(params));
    let g2: f64 = gradient.iter().map(|g| g * g).sum();
    let unchanged = |outcome| ArmijoResult {
        params: params.to_vec(),
        step: 0.0,
        loss: base,
        outcome,
    };
    if g2 == 0.0 {
        return unchanged(StepOutcome::Stationary);
    }
    if !base.is_finite() || !g2.is_finite() {
        return unchanged(StepOutcome::Rejected);
    }
    let mut t = initial_step;
    let mut trial = vec![0.0; params.len()];
    for _ in 0..=config.max_backtracks {
        for ((out, p), g) in trial.iter_mut().zip(params).zip(gradient) {
            *out = p - t * g;
        }
        let value = loss(&trial);
        if value.is_finite() && value <= base - config.c * t * g2 {
            return ArmijoResult {
                params: trial,
                step: t,
                loss: value,
                outcome: StepOutcome::Accepted,
            };
        }
        t *= config.backtrack;
    }
    unchanged(StepOutcome::Rejected)
}

/// Gradient-norm magnitudes of the three penalties.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermNorms {
    pub divergence: f64,
    pub invertibility: f64,
    pub reconstruction: f64,
}

/// Weights μ_T = (r_T / ‖∇T‖)·(‖∇R‖ / r_R), so that μ_T‖∇T‖ follow the
/// configured ratios with μ_R = 1. A term whose gradient norm is zero keeps
/// its weight; without a reconstruction gradient nothing changes.
pub fn adapt_weights(
    norms: TermNorms,
    ratios: WeightRatios,
    current: PenaltyWeights,
) -> PenaltyWeights {
    let valid = |v: f64| v > 0.0 && v.is_finite();
    if !valid(norms.reconstruction) {
        return current;
    }
    let unit = norms.reconstruction / ratios.reconstruction;
    let solve = |ratio: f64, norm: f64, old: f64| {
        if valid(norm) {
            ratio / norm * unit
        } else {
            old
        }
    };
    PenaltyWeights {
        divergence: solve(ratios.divergence, norms.divergence, current.divergence),
        invertibility: solve(
            ratios.invertibility,
            norms.invertibility,
            current.invertibility,
        ),
        reconstruction: 1.0,
    }
}

/// Shuffles `0..n` once and sweeps a window across it in increments of
/// `stride`, wrapping around the end: ⌈n / stride⌉ windows.
pub fn make_minibatches<R: Rng + ?Sized>(
    n: usize,
    window: usize,
    stride: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if stride == 0 || stride > window || window > n {
        return Err(Error::Config(format!(
            "need 0 < stride ≤ window ≤ n, got stride {stride}, window {window}, n {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok((0..n.div_ceil(stride))
        .map(|i| (0..window).map(|o| order[(i * stride + o) % n]).collect())
        .collect())
}

/// Sets each entry to 0 independently with probability `rate`.
pub fn apply_masking_noise<R: Rng + ?Sized>(
    batch: &DMatrix<f64>,
    rate: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    if rate <= 0.0 {
        return batch.clone();
    }
    batch.map(|v| if rng.gen::<f64>() < rate { 0.0 } else { v })
}

// ---------------------------------------------------------------------------
// Block-coordinate descent

fn block_layer<'m>(encoder: &'m Encoder, decoder: &'m Decoder, block: Block) -> &'m Layer {
    match block {
        Block::Encoder(j) => &encoder.layers()[j],
        Block::Decoder(m) => &decoder.layers()[m],
    }
}

fn set_block(
    encoder: &mut Encoder,
    decoder: &mut Decoder,
    block: Block,
    layer: Layer,
) -> Result<()> {
    match block {
        Block::Encoder(j) => encoder.set_layer(j, layer),
        Block::Decoder(m) => decoder.set_layer(m, layer),
    }
}

fn block_gradient(grad: &NetworkGradient, block: Block) -> Vec<f64> {
    match block {
        Block::Encoder(j) => grad.encoder[j].to_flat(),
        Block::Decoder(m) => grad.decoder[m].to_flat(),
    }
}

/// Encoder blocks input→output, then decoder blocks input→output.
pub fn block_order(encoder: &Encoder, decoder: &Decoder, frozen: &[Block]) -> Vec<Block> {
    (0..encoder.layers().len())
        .map(Block::Encoder)
        .chain((0..decoder.depth()).map(Block::Decoder))
        .filter(|b| !frozen.contains(b))
        .collect()
}

/// How the target evolves during a run of epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TargetMode {
    Fixed,
    Annealed,
}

/// Mutable optimizer bookkeeping shared across blocks.
struct Optimizer<'c> {
    config: &'c TrainConfig,
    /// Next initial trial step per block.
    steps: Vec<(Block, f64)>,
    norm_sums: TermNorms,
    norm_count: usize,
}

impl<'c> Optimizer<'c> {
    fn new(config: &'c TrainConfig) -> Self {
        Self {
            config,
            steps: Vec::new(),
            norm_sums: TermNorms::default(),
            norm_count: 0,
        }
    }

    fn initial_step(&self, block: Block) -> f64 {
        self.steps
            .iter()
            .find(|(b, _)| *b == block)
            .map_or(self.config.armijo.initial_step, |&(_, t)| t)
    }

    fn remember_step(&mut self, block: Block, t: f64) {
        match self.steps.iter_mut().find(|(b, _)| *b == block) {
            Some(entry) => entry.1 = t,
            None => self.steps.push((block, t)),
        }
    }
}

struct EpochStats {
    accepted: usize,
    rejected: usize,
    step_sum: f64,
}

/// Policy for training-time Beta fits: degenerate fits are scored at
/// clamped shapes instead of aborting the run.
const TRAIN_POLICY: DegeneratePolicy = DegeneratePolicy::Clamp;

#[allow(clippy::too_many_arguments)]
fn descend_block(
    state: &mut TrainState,
    opt: &mut Optimizer<'_>,
    objective: &Objective<'_>,
    block: Block,
    stats: &mut EpochStats,
) -> Result<()> {
    let (report, terms) = objective.gradients(&state.encoder, &state.decoder)?;
    let combined = terms.combine(
        objective.weights,
        objective.foreign.map_or(0.0, |f| f.weight),
    );
    let gradient = block_gradient(&combined, block);

    opt.norm_sums.divergence += terms.divergence.norm();
    opt.norm_sums.invertibility += terms.invertibility.norm();
    opt.norm_sums.reconstruction += terms.reconstruction.norm();
    opt.norm_count += 1;

    let base = block_layer(&state.encoder, &state.decoder, block).clone();
    let params = base.to_flat();
    let mut trial_enc = state.encoder.clone();
    let mut trial_dec = state.decoder.clone();
    let loss = |p: &[f64]| -> f64 {
        if set_block(&mut trial_enc, &mut trial_dec, block, base.from_flat(p)).is_err() {
            return f64::NAN;
        }
        objective
            .evaluate(&trial_enc, &trial_dec)
            .map_or(f64::NAN, |r| r.total)
    };
    let initial = opt.initial_step(block);
    let result = armijo_step(
        loss,
        &params,
        &gradient,
        initial,
        Some(report.total),
        &opt.config.armijo,
    );
    match result.outcome {
        StepOutcome::Accepted => {
            set_block(
                &mut state.encoder,
                &mut state.decoder,
                block,
                base.from_flat(&result.params),
            )?;
            opt.remember_step(block, 2.0 * result.step);
            stats.accepted += 1;
            stats.step_sum += result.step;
        }
        StepOutcome::Rejected => stats.rejected += 1,
        StepOutcome::Stationary => {}
    }
    state.step_count += 1;

    let period = opt.config.ratio_update_period;
    if period > 0 && opt.norm_count >= period {
        let c = opt.norm_count as f64;
        let mean = TermNorms {
            divergence: opt.norm_sums.divergence / c,
            invertibility: opt.norm_sums.invertibility / c,
            reconstruction: opt.norm_sums.reconstruction / c,
        };
        state.weights = adapt_weights(mean, opt.config.ratios, state.weights);
        opt.norm_sums = TermNorms::default();
        opt.norm_count = 0;
    }
    Ok(())
}

/// Runs `epochs` epochs of block-coordinate descent on `data`.
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    state: &mut TrainState,
    config: &TrainConfig,
    data: &DMatrix<f64>,
    epochs: usize,
    mode: TargetMode,
    phase: &str,
    frozen: &[Block],
    foreign: Option<ForeignConfig<'_>>,
    rng: &mut ChaCha8Rng,
    foreign_rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n = data.ncols();
    let window = config.window_size.min(n);
    let stride = config.stride().min(window);
    if window < config.window_size {
        warn!(
            "window size {} exceeds {n} examples; using {window}",
            config.window_size
        );
    }
    let example_divergence = config.uses_example_divergence(data.nrows());
    let blocks = block_order(&state.encoder, &state.decoder, frozen);
    let mut opt = Optimizer::new(config);
    for epoch in 0..epochs {
        let target = state.current_target();
        // A derived margin tracks the own-class density as it sharpens; one
        // fixed at the start would sit above it for the rest of training.
        let foreign = match foreign {
            Some(f) => match f.margin {
                Some(m) => Some((f, m)),
                None => foreign_margin(state, data)?.map(|m| (f, m)),
            },
            None => None,
        };
        let mut stats = EpochStats {
            accepted: 0,
            rejected: 0,
            step_sum: 0.0,
        };
        for indices in make_minibatches(n, window, stride, rng)? {
            let batch = data.select_columns(indices.iter());
            let corrupted = (config.noise_rate > 0.0)
                .then(|| apply_masking_noise(&batch, config.noise_rate, rng));
            let foreign_batch = foreign.map(|(f, _)| {
                let m = f.points.ncols();
                let picks: Vec<usize> = (0..window).map(|_| foreign_rng.gen_range(0..m)).collect();
                f.points.select_columns(picks.iter())
            });
            for &block in &blocks {
                let objective = Objective {
                    clean: &batch,
                    corrupted: corrupted.as_ref(),
                    target,
                    weights: state.weights,
                    example_divergence,
                    policy: TRAIN_POLICY,
                    foreign: foreign
                        .zip(foreign_batch.as_ref())
                        .map(|((f, margin), points)| ForeignPenalty {
                            points,
                            marginal: target,
                            margin,
                            weight: f.weight,
                        }),
                };
                descend_block(state, &mut opt, &objective, block, &mut stats)?;
            }
        }

        let full = Objective {
            clean: data,
            corrupted: None,
            target,
            weights: state.weights,
            example_divergence,
            policy: DegeneratePolicy::Clamp,
            foreign: foreign.map(|(f, margin)| ForeignPenalty {
                points: f.points,
                marginal: target,
                margin,
                weight: f.weight,
            }),
        };
        let report = full.evaluate(&state.encoder, &state.decoder)?;
        let fit = report.per_dimension_divergences.iter().sum::<f64>()
            / report.per_dimension_divergences.len() as f64;
        let record = EpochRecord {
            phase: phase.to_string(),
            epoch,
            report: report.clone(),
            fit_divergence: fit,
            target,
            weights: state.weights,
            accepted: stats.accepted,
            rejected: stats.rejected,
            mean_step: if stats.accepted > 0 {
                stats.step_sum / stats.accepted as f64
            } else {
                0.0
            },
        };
        info!("{record}");
        state.objective_history.push(report);
        state.log.push(record);
        if mode == TargetMode::Annealed {
            state.schedule.schedule_next(fit);
        }
    }
    Ok(())
}

/// Greedy layerwise pretraining: level m trains encoder layer m together
/// with decoder layer M−1−m as a single-layer model on the codes of the
/// previous level, with the target fixed at the schedule's initial target.
/// Needs as many encoder layers as decoder layers, all of width K.
pub fn pretrain(
    state: &mut TrainState,
    config: &TrainConfig,
    data: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let k = data.nrows();
    let depth = state.decoder.depth();
    if config.pretrain_epochs == 0 {
        return Ok(());
    }
    if state.encoder.layers().len() != depth || state.encoder.widths().iter().any(|&w| w != k) {
        warn!("layerwise pretraining needs {depth} encoder layers of width {k}; skipped");
        return Ok(());
    }
    let mut codes = data.clone();
    let mut unused = stream_rng(config.seed, FOREIGN_STREAM);
    for level in 0..depth {
        let enc_layer = state.encoder.layers()[level].clone();
        let dec_index = depth - 1 - level;
        let dec_layer = state.decoder.layers()[dec_index].clone();
        let mut sub = TrainState::new(
            Encoder::new(vec![enc_layer], state.encoder.threshold())?,
            Decoder::new(vec![dec_layer])?,
            state.schedule.clone(),
            state.weights,
        );
        sub.schedule = TargetSchedule::new(
            config.schedule.initial(),
            config.schedule.final_target(),
            config.schedule.advance_tolerance(),
            config.schedule.interpolation_steps(),
        )?;
        run_epochs(
            &mut sub,
            config,
            &codes,
            config.pretrain_epochs,
            TargetMode::Fixed,
            &format!("pretrain{level}"),
            &[],
            None,
            rng,
            &mut unused,
        )?;
        let trained_enc = sub.encoder.layers()[0].clone();
        codes = sub.encoder.forward_batch(&codes)?;
        state.encoder.set_layer(level, trained_enc)?;
        state
            .decoder
            .set_layer(dec_index, sub.decoder.layers()[0].clone())?;
        state.step_count += sub.step_count;
        state.objective_history.append(&mut sub.objective_history);
        state.log.append(&mut sub.log);
    }
    Ok(())
}

/// Own-class log-density mean − 2 sd under the current model.
fn foreign_margin(state: &TrainState, data: &DMatrix<f64>) -> Result<Option<f64>> {
    let target = state.current_target();
    let mut values = Vec::with_capacity(data.ncols());
    for col in data.column_iter() {
        if let Some(v) = latent_log_density(&state.decoder, target, &col.into_owned())?.finite() {
            values.push(v);
        }
    }
    if values.len() < 2 {
        return Ok(None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(Some(mean - 2.0 * sd))
}

/// Block-coordinate fine-tuning of all (non-frozen) layers with target
/// annealing, optionally with a foreign-example penalty.
pub fn finetune(
    state: &mut TrainState,
    config: &TrainConfig,
    data: &DMatrix<f64>,
    foreign: Option<ForeignConfig<'_>>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut foreign_rng = stream_rng(config.seed, FOREIGN_STREAM);
    let foreign = foreign.filter(|f| f.weight > 0.0 && f.points.ncols() > 0);
    if let Some(f) = foreign {
        if f.margin.is_none() && foreign_margin(state, data)?.is_none() {
            warn!("own-class density is out of support almost everywhere; foreign penalty inactive until it is not");
        }
    }
    run_epochs(
        state,
        config,
        data,
        config.epochs,
        TargetMode::Annealed,
        "finetune",
        &config.frozen,
        foreign,
        rng,
        &mut foreign_rng,
    )
}

/// Full pipeline on preprocessed data (one example per column):
/// initialization, layerwise pretraining, fine-tuning.
pub fn train(
    config: &TrainConfig,
    data: &DMatrix<f64>,
    foreign: Option<ForeignConfig<'_>>,
) -> Result<TrainState> {
    let k = data.nrows();
    config.validate(k)?;
    if data.ncols() < 2 {
        return Err(Error::Data(format!(
            "training needs at least 2 examples, got {}",
            data.ncols()
        )));
    }
    let (encoder, decoder) = init_params(config, data)?;
    let mut state = TrainState::new(
        encoder,
        decoder,
        config.schedule.clone(),
        config.initial_weights,
    );
    let mut rng = stream_rng(config.seed, TRAIN_STREAM);
    pretrain(&mut state, config, data, &mut rng)?;
    finetune(&mut state, config, data, foreign, &mut rng)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::condition_penalty;

    fn schedule() -> TargetSchedule {
        TargetSchedule::new(
            BetaParams::new(2.0, 20.0).unwrap(),
            BetaParams::new(0.02, 0.2).unwrap(),
            0.1,
            4,
        )
        .unwrap()
    }

    fn sample_data(k: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(k, n, |_, _| rng.gen_range(0.05..0.95))
    }

    #[test]
    fn armijo_quadratic_accepts_unit_step() {
        let loss = |p: &[f64]| 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        let r = armijo_step(
            loss,
            &[1.0, 0.0],
            &[1.0, 0.0],
            1.0,
            None,
            &ArmijoConfig::default(),
        );
        assert_eq!(r.outcome, StepOutcome::Accepted);
        assert_eq!(r.step, 1.0);
        assert_eq!(r.params, vec![0.0, 0.0]);
    }

    #[test]
    fn armijo_zero_gradient_and_rejection() {
        let loss = |p: &[f64]| p[0] * p[0];
        let r = armijo_step(loss, &[0.0], &[0.0], 1.0, None, &ArmijoConfig::default());
        assert_eq!(
            (r.outcome, r.step, r.params.clone()),
            (StepOutcome::Stationary, 0.0, vec![0.0])
        );
        // Gradient pointing uphill: every trial increases the loss.
        let r = armijo_step(loss, &[1.0], &[-1.0], 1.0, None, &ArmijoConfig::default());
        assert_eq!((r.outcome, r.params), (StepOutcome::Rejected, vec![1.0]));
        let r = armijo_step(
            |_: &[f64]| f64::NAN,
            &[1.0],
            &[1.0],
            1.0,
            Some(1.0),
            &ArmijoConfig::default(),
        );
        assert_eq!(r.outcome, StepOutcome::Rejected);
    }

    #[test]
    fn weight_adaptation_examples() {
        let ratios = WeightRatios {
            divergence: 1.0,
            invertibility: 1.0,
            reconstruction: 1.0,
        };
        let norms = TermNorms {
            divergence: 2.0,
            invertibility: 1.0,
            reconstruction: 1.0,
        };
        let w = adapt_weights(norms, ratios, PenaltyWeights::uniform());
        assert_eq!(
            (w.divergence, w.invertibility, w.reconstruction),
            (0.5, 1.0, 1.0)
        );
        // Already balanced → fixed point.
        let again = adapt_weights(norms, ratios, w);
        assert!((again.divergence - w.divergence).abs() < 1e-12);
        // Zero invertibility gradient keeps its weight.
        let current = PenaltyWeights::new(0.3, 0.7, 1.0).unwrap();
        let w = adapt_weights(
            TermNorms {
                invertibility: 0.0,
                ..norms
            },
            ratios,
            current,
        );
        assert_eq!(w.invertibility, 0.7);
        assert_eq!(
            adapt_weights(TermNorms::default(), ratios, current),
            current
        );
    }

    #[test]
    fn minibatch_windows_overlap_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let windows = make_minibatches(8, 4, 2, &mut rng).unwrap();
        assert_eq!(windows.len(), 4);
        let mut counts = [0; 8];
        for w in &windows {
            assert_eq!(w.len(), 4);
            for &i in w {
                counts[i] += 1;
            }
        }
        assert_eq!(counts, [2; 8]);
        let disjoint = make_minibatches(9, 3, 3, &mut rng).unwrap();
        let mut all: Vec<usize> = disjoint.concat();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert!(make_minibatches(4, 2, 3, &mut rng).is_err());
        assert!(make_minibatches(4, 5, 1, &mut rng).is_err());
    }

    #[test]
    fn masking_noise_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = DMatrix::from_element(10, 10, 0.5);
        assert_eq!(apply_masking_noise(&b, 0.0, &mut rng), b);
        let big = DMatrix::from_element(1000, 1000, 0.5);
        let noisy = apply_masking_noise(&big, 0.1, &mut rng);
        let frac = noisy.iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((frac - 0.1).abs() < 0.002, "{frac}");
    }

    fn first_layer_variance(enc: &Encoder, data: &DMatrix<f64>) -> f64 {
        let first = enc.layers()[0].forward(data);
        let n = first.ncols() as f64;
        first
            .row_iter()
            .map(|r| {
                let m = r.sum() / n;
                r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
            })
            .sum::<f64>()
            / first.nrows() as f64
    }

    #[test]
    fn uncentred_initialization_uses_constant_biases() {
        let data = sample_data(3, 200, 5);
        let mut config = TrainConfig::new(schedule());
        config.center_init_bias = false;
        let (enc, dec) = init_params(&config, &data).unwrap();
        for l in enc.layers().iter().chain(dec.layers()) {
            for &b in l.bias.iter() {
                assert!((b - 0.1f64.ln()).abs() < 1e-15);
            }
        }
        assert!((0.1f64.ln() + 2.302585).abs() < 1e-6);
        assert!(condition_penalty(&dec) < 1e-9);
        let want = schedule().initial().variance();
        let var = first_layer_variance(&enc, &data);
        assert!((var - want).abs() < 0.1 * want, "{var} vs {want}");
    }

    #[test]
    fn centred_initialization_centres_hidden_layers_and_decoder_output() {
        let data = sample_data(3, 200, 5);
        let config = TrainConfig::new(schedule());
        let (enc, dec) = init_params(&config, &data).unwrap();
        assert!(condition_penalty(&dec) < 1e-9);
        let want = schedule().initial().variance();
        let var = first_layer_variance(&enc, &data);
        assert!((var - want).abs() < 0.1 * want, "{var} vs {want}");
        let layers: Vec<_> = enc.layers().iter().chain(dec.layers()).collect();
        let data_mean = data.column_mean();
        let mut h = data.clone();
        for (i, l) in layers.iter().enumerate() {
            let z = l.pre_activation(&h);
            for (r, mean) in z.column_mean().iter().enumerate() {
                let want = if i + 1 == layers.len() {
                    (data_mean[r] / (1.0 - data_mean[r])).ln()
                } else {
                    0.1f64.ln()
                };
                assert!((mean - want).abs() < 1e-12, "layer {i}: {mean} vs {want}");
            }
            h = l.forward(&h);
        }
    }

    #[test]
    fn orthonormal_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_orthonormal(3, 5, &mut rng);
        assert!((&q * q.transpose() - DMatrix::identity(3, 3)).norm() < 1e-12);
        let q = random_orthonormal(5, 3, &mut rng);
        assert!((q.transpose() * &q - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    fn small_config() -> TrainConfig {
        let mut c = TrainConfig::new(schedule());
        c.window_size = 20;
        c.epochs = 3;
        c.pretrain_epochs = 1;
        c.noise_rate = 0.1;
        c.seed = 9;
        c
    }

    #[test]
    fn training_is_reproducible() {
        let data = sample_data(2, 60, 4);
        let a = train(&small_config(), &data, None).unwrap();
        let b = train(&small_config(), &data, None).unwrap();
        assert_eq!(a.log_text(), b.log_text());
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.decoder, b.decoder);
        assert_eq!(a.log.len(), 2 + 3);
        let mean = a.schedule.mean();
        for r in &a.log {
            assert!((r.target.mean() - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_foreign_weight_is_bit_identical() {
        let data = sample_data(2, 60, 4);
        let other = sample_data(2, 30, 8);
        let plain = train(&small_config(), &data, None).unwrap();
        let zero = train(
            &small_config(),
            &data,
            Some(ForeignConfig {
                points: &other,
                weight: 0.0,
                margin: None,
            }),
        )
        .unwrap();
        assert_eq!(plain.log_text(), zero.log_text());
        assert_eq!(plain.decoder, zero.decoder);
    }

    #[test]
    fn frozen_blocks_stay_fixed() {
        let data = sample_data(2, 60, 4);
        let mut config = small_config();
        config.pretrain_epochs = 0;
        config.frozen = vec![Block::Encoder(0), Block::Encoder(1), Block::Decoder(1)];
        let (enc, dec) = init_params(&config, &data).unwrap();
        let state = train(&config, &data, None).unwrap();
        assert_eq!(state.encoder, enc);
        assert_eq!(state.decoder.layers()[1], dec.layers()[1]);
        assert_ne!(state.decoder.layers()[0], dec.layers()[0]);
    }
}
