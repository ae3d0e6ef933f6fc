//! Acceptance suite: runs every criterion and prints one PASS/FAIL line for
//! each, followed by the measured quantities. Exits nonzero when a criterion
//! cannot be evaluated at all (a crash, not a failed threshold); set
//! `DDM_ACCEPTANCE_STRICT=1` to also exit nonzero on any FAIL.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ddm_core::data::persist::{decode_model, encode_model};
use ddm_core::data::{idx, mask_elements};
use ddm_core::network::condition_penalty;
use ddm_core::objective::{DegeneratePolicy, Objective};
use ddm_core::trainer::stream_rng;
use ddm_core::{
    bernoulli_check, floored_mean, load_idx, marginal_fit_report, moment_match, sym_kl, train,
    train_class_models, BetaParams, ClassifierBundle, ClassifierConfig, Dataset, Decision, Decoder,
    DensitySummary, Encoder, Layer, LogDensity, ModelBundle, PenaltyWeights, PreprocessOptions,
    Preprocessor, TargetSchedule, TrainConfig,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome, String> {
    Ok(Outcome { pass, detail })
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn beta(a: f64, b: f64) -> BetaParams {
    BetaParams::new(a, b).unwrap()
}

// ---------------------------------------------------------------------------
// Shared fixtures

/// Two correlated Gaussian clusters in 2-D, alternating by column.
fn two_cluster_data(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DMatrix::zeros(2, n);
    for j in 0..n {
        let c = if j % 2 == 0 { -2.0 } else { 2.0 };
        let z: f64 = rng.sample(StandardNormal);
        m[(0, j)] = c + z;
        m[(1, j)] = 0.5 * c + 0.7 * z;
    }
    m
}

/// Two isotropic Gaussian classes centred at ∓(2, 2); label = column parity.
fn two_class_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<i64> = (0..n).map(|j| (j % 2) as i64).collect();
    let points = DMatrix::from_fn(2, n, |_, j| {
        let c = if j % 2 == 0 { -2.0 } else { 2.0 };
        let z: f64 = rng.sample(StandardNormal);
        c + z
    });
    Dataset::new(points, Some(labels), "two-class").unwrap()
}

/// The trained 2-D model shared by the invertibility, sculpting, entropy and
/// persistence criteria.
struct SculptedModel {
    model: ModelBundle,
    log: Vec<ddm_core::EpochRecord>,
    train_data: DMatrix<f64>,
    elapsed: Duration,
}

fn sculpted_config(divergence: bool) -> TrainConfig {
    let schedule = TargetSchedule::with_constant_mean(beta(0.5, 1.0), 2.0, 0.1, 12).unwrap();
    let mut c = TrainConfig::new(schedule);
    c.epochs = 60;
    if !divergence {
        c.initial_weights.divergence = 0.0;
        c.ratios.divergence = 0.0;
    }
    c
}

fn train_sculpted(divergence: bool) -> SculptedModel {
    let start = Instant::now();
    let train_data = two_cluster_data(400, 1);
    let pre = Preprocessor::fit(&train_data, PreprocessOptions::default()).unwrap();
    let y = pre.apply_batch(&train_data).unwrap();
    let state = train(&sculpted_config(divergence), &y, None).unwrap();
    let log = state.log.clone();
    let model = state.into_model(pre).unwrap();
    SculptedModel {
        model,
        log,
        train_data,
        elapsed: start.elapsed(),
    }
}

// ---------------------------------------------------------------------------
// 1. Normalization

fn normalization_model(k: usize, seed: u64) -> (ModelBundle, Duration) {
    let start = Instant::now();
    let data = if k == 1 {
        two_cluster_data(400, seed).rows(0, 1).into_owned()
    } else {
        two_cluster_data(400, seed)
    };
    let pre = Preprocessor::fit(&data, PreprocessOptions::default()).unwrap();
    let y = pre.apply_batch(&data).unwrap();
    let schedule = TargetSchedule::with_constant_mean(beta(2.0, 2.0), 2.0, 0.1, 1).unwrap();
    let mut c = TrainConfig::new(schedule);
    c.epochs = 40;
    let state = train(&c, &y, None).unwrap();
    (state.into_model(pre).unwrap(), start.elapsed())
}

/// Original-coordinate box that the preprocessor maps onto the open unit cube.
fn support_box(model: &ModelBundle) -> (DVector<f64>, DVector<f64>) {
    let k = model.dim();
    let lo = model
        .preprocessor
        .invert(&DVector::from_element(k, 1e-12))
        .unwrap();
    let hi = model
        .preprocessor
        .invert(&DVector::from_element(k, 1.0 - 1e-12))
        .unwrap();
    (lo.inf(&hi), lo.sup(&hi))
}

fn density(model: &ModelBundle, u: DVector<f64>) -> f64 {
    model.log_density(&u).unwrap().value().exp()
}

fn criterion_normalization() -> Result<Outcome, String> {
    let (m1, t1) = normalization_model(1, 1);
    let start = Instant::now();
    let (lo, hi) = support_box(&m1);
    let mass1 = support::midpoint_1d(
        |u| density(&m1, DVector::from_element(1, u)),
        lo[0],
        hi[0],
        200_000,
    );
    let t1 = t1 + start.elapsed();

    let (m2, t2) = normalization_model(2, 1);
    let start = Instant::now();
    let (lo, hi) = support_box(&m2);
    let mass2 = support::midpoint_2d(
        |a, b| density(&m2, DVector::from_vec(vec![a, b])),
        (lo[0], lo[1]),
        (hi[0], hi[1]),
        1000,
    );
    let t2 = t2 + start.elapsed();
    let pass = (mass1 - 1.0).abs() < 0.01
        && (mass2 - 1.0).abs() < 0.01
        && t1.as_secs() < 60
        && t2.as_secs() < 60;
    outcome(
        pass,
        format!(
            "mass K=1: {mass1:.5} ({}), K=2: {mass2:.5} ({})",
            secs(t1),
            secs(t2)
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Change of variables

fn random_decoder(k: usize, layers: usize, rng: &mut ChaCha8Rng) -> Decoder {
    let normal = StandardNormal;
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { normal.sample(rng) };
    Decoder::new(
        (0..layers)
            .map(|_| {
                let w = DMatrix::from_fn(k, k, |i, j| {
                    let base = if i == j { 1.5 } else { 0.0 };
                    base + 0.6 * gauss(rng)
                });
                let b = DVector::from_fn(k, |_, _| 0.5 * gauss(rng));
                Layer::new(w, b).unwrap()
            })
            .collect(),
    )
    .unwrap()
}

fn criterion_change_of_variables() -> Result<Outcome, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut points = 0;
    for k in 1..=4 {
        for _ in 0..5 {
            let dec = random_decoder(k, 2, &mut rng);
            for _ in 0..25 {
                let x = DVector::from_fn(k, |_, _| rng.gen_range(0.02..0.98));
                let analytic = dec.log_det_jacobian(&x).map_err(|e| e.to_string())?;
                let fd = support::fd_log_abs_det(|v| dec.forward(v).unwrap(), &x, 1e-6);
                worst = worst.max((analytic - fd).abs() / fd.abs().max(1.0));
                points += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && elapsed.as_secs() < 10,
        format!(
            "{points} points, K=1..4, max relative error {worst:.2e} ({})",
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Gradient suite

fn random_layer(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Layer {
    let normal = StandardNormal;
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { normal.sample(rng) };
    Layer::new(
        DMatrix::from_fn(output, input, |i, j| {
            (if i == j { 1.2 } else { 0.0 }) + 0.4 * gauss(rng)
        }),
        DVector::from_fn(output, |_, _| 0.3 * gauss(rng)),
    )
    .unwrap()
}

/// Reads or perturbs parameter `index` of one layer of an encoder or decoder.
#[derive(Clone, Copy)]
enum Param {
    Encoder(usize, usize),
    Decoder(usize, usize),
}

fn perturbed(enc: &Encoder, dec: &Decoder, p: Param, delta: f64) -> (Encoder, Decoder) {
    let (mut e, mut d) = (enc.clone(), dec.clone());
    let bump = |layer: &Layer, i: usize| {
        let mut flat = layer.to_flat();
        flat[i] += delta;
        layer.from_flat(&flat)
    };
    match p {
        Param::Encoder(l, i) => e.set_layer(l, bump(&enc.layers()[l], i)).unwrap(),
        Param::Decoder(l, i) => d.set_layer(l, bump(&dec.layers()[l], i)).unwrap(),
    }
    (e, d)
}

/// Worst relative error between analytic and finite-difference gradients
/// over every parameter of one random K=4, M=J=2 network on N=32 examples.
fn gradient_instance(seed: u64) -> Result<(usize, f64), String> {
    let (k, n) = (4, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = DMatrix::from_fn(k, n, |_, _| rng.gen_range(0.1..0.9));
    let enc = Encoder::new(
        vec![random_layer(&mut rng, k, k), random_layer(&mut rng, k, k)],
        0.0,
    )
    .unwrap();
    let dec = Decoder::new(vec![
        random_layer(&mut rng, k, k),
        random_layer(&mut rng, k, k),
    ])
    .unwrap();
    let weights = PenaltyWeights::new(1.0, 0.7, 1.3).unwrap();
    let mut objective = Objective::new(&batch, beta(0.8, 1.7), weights);
    objective.example_divergence = true;
    objective.policy = DegeneratePolicy::Fail;
    let (_, terms) = objective.gradients(&enc, &dec).map_err(|e| e.to_string())?;
    let grad = terms.combine(weights, 0.0);

    let mut params = Vec::new();
    for (l, g) in grad.encoder.iter().enumerate() {
        params.extend(
            g.to_flat()
                .into_iter()
                .enumerate()
                .map(|(i, v)| (Param::Encoder(l, i), v)),
        );
    }
    for (l, g) in grad.decoder.iter().enumerate() {
        params.extend(
            g.to_flat()
                .into_iter()
                .enumerate()
                .map(|(i, v)| (Param::Decoder(l, i), v)),
        );
    }
    let total = |p: Param, delta: f64| {
        let (e, d) = perturbed(&enc, &dec, p, delta);
        objective.evaluate(&e, &d).unwrap().total
    };
    let mut worst: f64 = 0.0;
    for &(p, analytic) in &params {
        let fd = support::richardson_derivative(|t| total(p, t), 0.0, 1e-3);
        worst = worst.max((analytic - fd).abs() / (fd.abs() + 1e-8));
    }
    Ok((params.len(), worst))
}

fn criterion_gradients() -> Result<Outcome, String> {
    // One such network has only 80 parameters, so three independent random
    // instances are checked in full.
    let start = Instant::now();
    let (mut checked, mut worst) = (0, 0.0f64);
    for seed in [3, 4, 5] {
        let (count, err) = gradient_instance(seed)?;
        checked += count;
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    outcome(
        checked >= 200 && worst < 1e-4 && elapsed.as_secs() < 60,
        format!(
            "{checked} parameters over 3 random networks (K=4, M=J=2, N=32), max relative error {worst:.2e} ({})",
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Divergence machinery

fn criterion_divergence() -> Result<Outcome, String> {
    let start = Instant::now();
    let shapes = [0.02, 0.1, 0.5, 1.5, 5.0];
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for &a in &shapes {
        for &b in &shapes {
            for &c in &shapes {
                for &d in &shapes {
                    let closed = sym_kl(beta(a, b), beta(c, d)).map_err(|e| e.to_string())?;
                    let quad = support::sym_kl_quadrature((a, b), (c, d));
                    worst = worst.max((closed - quad).abs() / quad.abs().max(1.0));
                    cases += 1;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_fit: f64 = 0.0;
    for (a, b) in [(0.5, 0.5), (2.0, 5.0), (0.2, 2.0), (5.0, 1.0), (1.0, 1.0)] {
        let dist = rand_distr::Beta::new(a, b).unwrap();
        let samples: Vec<f64> = (0..100_000).map(|_| dist.sample(&mut rng)).collect();
        let fit = moment_match(&samples).map_err(|e| e.to_string())?;
        worst_fit = worst_fit
            .max(((fit.alpha() - a) / a).abs())
            .max(((fit.beta() - b) / b).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-6 && worst_fit < 0.05 && elapsed.as_secs() < 30,
        format!(
            "{cases} shape pairs, max sym-KL error {worst:.2e}; moment-match max shape error {:.2}% ({})",
            100.0 * worst_fit,
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Invertibility

fn criterion_invertibility(s: &SculptedModel) -> Result<Outcome, String> {
    let test = two_cluster_data(400, 2);
    let mut worst: f64 = 0.0;
    let (mut clamped, mut outside) = (0, 0);
    for col in test.column_iter() {
        // Test points beyond the training range map outside the cube, where
        // the decoder has no pre-image; they are pulled onto its margin.
        let (y, was_clamped) = s
            .model
            .preprocessor
            .apply_clamped(&col.into_owned())
            .map_err(|e| e.to_string())?;
        clamped += was_clamped as usize;
        // Points outside the decoder's image have no pre-image (zero density).
        let Ok(x) = s.model.decoder.inverse(&y) else {
            outside += 1;
            continue;
        };
        let back = s.model.decoder.forward(&x).map_err(|e| e.to_string())?;
        worst = worst.max((back - y).amax());
    }
    let max_condition = s
        .log
        .iter()
        .map(|r| r.report.invertibility)
        .fold(0.0, f64::max);
    let final_condition = condition_penalty(&s.model.decoder);
    outcome(
        outside < 400 && worst < 1e-8 && max_condition < 5.0,
        format!(
            "max round-trip error {worst:.2e} on the {} of 400 test points inside the decoder image ({clamped} clamped into the cube first); max logged condition penalty {max_condition:.3} over {} epochs (final {final_condition:.3})",
            400 - outside,
            s.log.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Marginal sculpting

fn mean_fit(s: &SculptedModel) -> f64 {
    let fits = marginal_fit_report(&s.model, &s.train_data).unwrap();
    fits.iter().map(|f| f.sym_kl).sum::<f64>() / fits.len() as f64
}

fn criterion_sculpting(s: &SculptedModel) -> Result<Outcome, String> {
    let control = train_sculpted(false);
    let (fit, control_fit) = (mean_fit(s), mean_fit(&control));
    let annealed = s.model.marginal == beta(0.5, 1.0)
        && s.log.last().map(|r| r.target) == Some(beta(0.5, 1.0));
    let elapsed = s.elapsed + control.elapsed;
    outcome(
        annealed && fit < 0.1 && control_fit > 1.0 && elapsed.as_secs() < 300,
        format!(
            "mean sym-KL vs Beta(0.5,1): regularized {fit:.4}, control (mu_D=0) {control_fit:.3}; schedule reached final target: {annealed} ({})",
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Table-1 ordering on the MNIST subset

fn criterion_mnist() -> Result<Outcome, String> {
    let start = Instant::now();
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let train_set =
        load_idx(&dir.join("train-500-images.idx3-ubyte"), None).map_err(|e| e.to_string())?;
    let test_set =
        load_idx(&dir.join("test-500-images.idx3-ubyte"), None).map_err(|e| e.to_string())?;
    let options = PreprocessOptions {
        pca_dim: Some(30),
        ..Default::default()
    };
    let pre = Preprocessor::fit(&train_set.points, options).map_err(|e| e.to_string())?;
    let y = pre
        .apply_batch(&train_set.points)
        .map_err(|e| e.to_string())?;
    let schedule = TargetSchedule::with_constant_mean(beta(10.0, 10.0), 2.0, 0.1, 12).unwrap();
    let mut c = TrainConfig::new(schedule);
    c.epochs = 100;
    c.epsilon_threshold = 0.0;
    let model = train(&c, &y, None)
        .and_then(|s| s.into_model(pre))
        .map_err(|e| e.to_string())?;
    let mut rng = stream_rng(0, 3);
    let corrupted = mask_elements(&test_set.points, 0.1, &mut rng).map_err(|e| e.to_string())?;
    let eval = |d: &DMatrix<f64>| model.log_density_batch(d, 1).unwrap();
    let (tr, te, co) = (
        eval(&train_set.points),
        eval(&test_set.points),
        eval(&corrupted),
    );
    let (str_, ste, sco) = (
        DensitySummary::of(&tr),
        DensitySummary::of(&te),
        DensitySummary::of(&co),
    );
    let (mtr, mte, mco) = (
        str_.mean_in_support,
        ste.mean_in_support,
        sco.mean_in_support,
    );
    let gap = mtr - mco;
    let elapsed = start.elapsed();
    let pass = (mtr - mte).abs() < 0.1 * gap.abs()
        && gap > 0.0
        && mte - mco > 0.0
        && elapsed.as_secs() < 900;
    outcome(
        pass,
        format!(
            "in-support means: train {mtr:.3}, test {mte:.3}, corrupted {mco:.3} (out of support {}/{}/{} of 500); floored at -1000: {:.1}/{:.1}/{:.1} ({})",
            str_.out_of_support,
            ste.out_of_support,
            sco.out_of_support,
            floored_mean(&tr, -1000.0),
            floored_mean(&te, -1000.0),
            floored_mean(&co, -1000.0),
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Entropy consistency

fn criterion_entropy(s: &SculptedModel) -> Result<Outcome, String> {
    let b = bernoulli_check(&s.model, &s.train_data).map_err(|e| e.to_string())?;
    let rel = (b.empirical - b.expected).abs() / b.expected.abs();
    outcome(
        rel < 0.15,
        format!(
            "p = {:.4}, -K*H(Bern(p)) = {:.4}, empirical {:.4} (relative difference {:.1}%, ones fraction {:.3})",
            b.p,
            b.expected,
            b.empirical,
            100.0 * rel,
            b.ones_fraction
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Classifier direction

/// Floor for log-densities in the own/foreign gap, so that points outside a
/// class model's support contribute a finite value.
const GAP_FLOOR: f64 = -30.0;

fn classifier(foreign_weight: f64, train_set: &Dataset) -> ClassifierBundle {
    let schedule = TargetSchedule::with_constant_mean(beta(2.0, 2.0), 2.0, 0.1, 1).unwrap();
    let mut t = TrainConfig::new(schedule);
    t.epochs = 200;
    t.epsilon_threshold = 0.0;
    t.window_size = 50;
    t.ratios.divergence = 0.03;
    let config = ClassifierConfig {
        train: t,
        preprocess: PreprocessOptions::default(),
        foreign_weight,
        log_threshold: f64::NEG_INFINITY,
        threads: 2,
    };
    train_class_models(train_set, &config).unwrap()
}

struct ClassifierStats {
    accuracy: f64,
    gap: f64,
}

fn classifier_stats(bundle: &ClassifierBundle, test: &Dataset) -> ClassifierStats {
    let labels = test.labels.as_ref().unwrap();
    let results = bundle.classify_batch(&test.points, 2).unwrap();
    let correct = results
        .iter()
        .zip(labels)
        .filter(|(r, &l)| r.label == Some(l))
        .count();
    let (mut own, mut foreign) = (Vec::new(), Vec::new());
    for (r, &l) in results.iter().zip(labels) {
        for (c, d) in bundle.classes.iter().zip(&r.log_densities) {
            if c.label == l {
                own.push(*d);
            } else {
                foreign.push(*d);
            }
        }
    }
    ClassifierStats {
        accuracy: correct as f64 / labels.len() as f64,
        gap: floored_mean(&own, GAP_FLOOR) - floored_mean(&foreign, GAP_FLOOR),
    }
}

fn criterion_classifier() -> Result<Outcome, String> {
    let start = Instant::now();
    let train_set = two_class_data(1000, 11);
    let test = two_class_data(400, 12);
    let plain = classifier(0.0, &train_set);
    let penalized = classifier(1.0, &train_set);
    let (p, f) = (
        classifier_stats(&plain, &test),
        classifier_stats(&penalized, &test),
    );

    // λ at the 5% quantile of each point's best class log-density.
    let mut bundle = plain.clone();
    let results = bundle.classify_batch(&test.points, 2).unwrap();
    let mut best: Vec<f64> = results
        .iter()
        .map(|r| {
            r.log_densities
                .iter()
                .map(|d| d.value())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    best.sort_by(|a, b| a.total_cmp(b));
    bundle.log_threshold = best[(0.05 * best.len() as f64) as usize];
    let labels = test.labels.as_ref().unwrap();
    let decisions: Vec<Decision> = results.iter().map(|r| bundle.decide(r)).collect();
    let accepted = decisions.iter().filter(|d| **d != Decision::Reject).count();
    let accepted_correct = decisions
        .iter()
        .zip(labels)
        .filter(|(d, &l)| **d == Decision::Label(l))
        .count();
    let reject_rate = 1.0 - accepted as f64 / decisions.len() as f64;
    let accepted_accuracy = accepted_correct as f64 / accepted.max(1) as f64;
    let elapsed = start.elapsed();
    let pass = p.accuracy > 0.95
        && f.accuracy >= p.accuracy
        && f.gap > p.gap
        && accepted_accuracy >= p.accuracy
        && elapsed.as_secs() < 300;
    outcome(
        pass,
        format!(
            "accuracy {:.4} (foreign penalty: {:.4}); own-foreign gap {:.4} (foreign penalty: {:.4}); rejecting {:.1}% gives accepted accuracy {:.4} ({})",
            p.accuracy,
            f.accuracy,
            p.gap,
            f.gap,
            100.0 * reject_rate,
            accepted_accuracy,
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Persistence

fn criterion_persistence(s: &SculptedModel) -> Result<Outcome, String> {
    let bytes = encode_model(&s.model);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ddm");
    ddm_core::save_model(&s.model, &path).map_err(|e| e.to_string())?;
    let loaded = ddm_core::load_model(&path).map_err(|e| e.to_string())?;
    let points = two_cluster_data(100, 3);
    let before = s
        .model
        .log_density_batch(&points, 1)
        .map_err(|e| e.to_string())?;
    let after = loaded
        .log_density_batch(&points, 1)
        .map_err(|e| e.to_string())?;
    let bits = |v: &[LogDensity]| v.iter().map(|d| d.value().to_bits()).collect::<Vec<_>>();
    let identical = bits(&before) == bits(&after)
        && decode_model(&bytes).map_err(|e| e.to_string())? == s.model;

    // Hand-built IDX fixture: one 2×2 image and a two-entry label file.
    let image_file: Vec<u8> = [
        &[0u8, 0, 8, 3][..],
        &1u32.to_be_bytes(),
        &2u32.to_be_bytes(),
        &2u32.to_be_bytes(),
        &[0, 255, 128, 64],
    ]
    .concat();
    let label_file: Vec<u8> = [&[0u8, 0, 8, 1][..], &2u32.to_be_bytes(), &[7, 2]].concat();
    let images = idx::parse_images(&image_file).map_err(|e| e.to_string())?;
    let labels = idx::parse_labels(&label_file).map_err(|e| e.to_string())?;
    let expected = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
    let values_ok =
        images.column(0).iter().zip(expected).all(|(a, b)| *a == b) && labels == vec![7, 2];
    let bytes_ok = idx::encode_images(&images, 2, 2).map_err(|e| e.to_string())? == image_file
        && idx::encode_labels(&labels).map_err(|e| e.to_string())? == label_file;
    outcome(
        identical && values_ok && bytes_ok,
        format!(
            "100 log-densities bitwise identical after save/load: {identical}; IDX values exact: {values_ok}; IDX re-encoding byte-exact: {bytes_ok}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 11. Determinism of `ddm train`

fn criterion_determinism() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = two_cluster_data(300, 5);
    let csv: String = data
        .column_iter()
        .map(|c| format!("{:e},{:e}\n", c[0], c[1]))
        .collect();
    std::fs::write(dir.path().join("data.csv"), csv).map_err(|e| e.to_string())?;
    std::fs::write(
        dir.path().join("run.cfg"),
        "# determinism check\ntarget_alpha = 0.5\ntarget_beta = 1\nepochs = 15\nseed = 9\n",
    )
    .map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_ddm"))
            .current_dir(dir.path())
            .env("DDM_THREADS", "1")
            .args([
                "train", "--config", "run.cfg", "--data", "data.csv", "--out",
            ])
            .arg(format!("{name}.ddm"))
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "ddm train failed: {}",
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        Ok(out.stdout)
    };
    let (a, b) = (run("a")?, run("b")?);
    let models_equal = std::fs::read(dir.path().join("a.ddm")).ok()
        == std::fs::read(dir.path().join("b.ddm")).ok();
    let lines = String::from_utf8_lossy(&a).lines().count();
    outcome(
        a == b && lines > 1 && models_equal,
        format!("two runs: epoch logs identical: {} ({lines} lines); model files identical: {models_equal}", a == b),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let start = Instant::now();
    let sculpted = train_sculpted(true);
    let criteria: Vec<(&str, Box<dyn Fn() -> Result<Outcome, String> + '_>)> = vec![
        ("normalization", Box::new(criterion_normalization)),
        (
            "change-of-variables exactness",
            Box::new(criterion_change_of_variables),
        ),
        ("gradient suite", Box::new(criterion_gradients)),
        ("divergence machinery", Box::new(criterion_divergence)),
        (
            "invertibility",
            Box::new(|| criterion_invertibility(&sculpted)),
        ),
        (
            "marginal sculpting",
            Box::new(|| criterion_sculpting(&sculpted)),
        ),
        (
            "train/test/corrupted ordering (MNIST subset)",
            Box::new(criterion_mnist),
        ),
        (
            "entropy consistency",
            Box::new(|| criterion_entropy(&sculpted)),
        ),
        ("classifier direction", Box::new(criterion_classifier)),
        ("persistence", Box::new(|| criterion_persistence(&sculpted))),
        ("determinism", Box::new(criterion_determinism)),
    ];
    let (mut failed, mut crashed) = (0, 0);
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(o) => {
                failed += !o.pass as usize;
                println!(
                    "[{}] {:>2}. {name}: {}",
                    if o.pass { "PASS" } else { "FAIL" },
                    i + 1,
                    o.detail
                );
            }
            Err(e) => {
                crashed += 1;
                println!("[FAIL] {:>2}. {name}: could not be evaluated: {e}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {} failed, {} not evaluated ({})",
        criteria.len() - failed - crashed,
        failed,
        crashed,
        secs(start.elapsed())
    );
    let strict = std::env::var("DDM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if crashed > 0 || (strict && failed > 0) {
        std::process::exit(1);
    }
}
