//! The `ddm` subcommands. Each reads a validated [`RunConfig`], writes its
//! files, and reports human-facing output to the given writers.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ddm_core::data::{format_f64, mask_elements};
use ddm_core::trainer::stream_rng;
use ddm_core::{
    bernoulli_check, entropy_report, load_classifier, load_csv, load_idx, load_model,
    marginal_fit_report, save_classifier, save_model, train_class_models, ClassifierConfig,
    Dataset, Decision, DensitySummary, LogDensity, Preprocessor,
};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Random stream for evaluation-time corruption.
const CORRUPT_STREAM: u64 = 3;
/// Random stream for ancestral sampling.
const SAMPLE_STREAM: u64 = 4;

/// Reads the data set named by the `data` key. `format` selects `csv` or
/// `idx`; `auto` (the default) picks CSV for a `.csv` extension.
pub fn load_dataset(cfg: &RunConfig, labels_default: bool) -> CliResult<Dataset> {
    let path = cfg.path("data")?;
    let format = match cfg.get("format").unwrap_or("auto") {
        "auto"
            if path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("csv")) =>
        {
            "csv"
        }
        "auto" => "idx",
        f @ ("csv" | "idx") => f,
        other => return Err(CliError::config(format!("unknown data format {other:?}"))),
    };
    let data = if format == "csv" {
        load_csv(&path, cfg.csv_options(labels_default)?)?
    } else {
        load_idx(&path, cfg.optional_path("labels").as_deref())?
    };
    if data.is_empty() {
        return Err(CliError::data(format!(
            "{} holds no examples",
            path.display()
        )));
    }
    Ok(data)
}

fn write_csv(
    path: &Path,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
) -> CliResult<()> {
    let file = fs::File::create(path)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// One-line summary shared by `train` and `eval`, so both report the mean
/// log-density identically.
pub fn summary_line(values: &[LogDensity]) -> String {
    let s = DensitySummary::of(values);
    format!(
        "mean_log_density={} out_of_support={}/{}",
        format_f64(s.mean_in_support),
        s.out_of_support,
        s.count
    )
}

pub fn train(
    cfg: &RunConfig,
    threads: usize,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult<()> {
    let model_path = cfg.path("out")?;
    let train_config = cfg.train_config()?;
    let options = cfg.preprocess_options()?;
    let data = load_dataset(cfg, false)?;
    let preprocessor = Preprocessor::fit(&data.points, options)?;
    let pre = preprocessor.apply_batch(&data.points)?;
    let state = ddm_core::train(&train_config, &pre, None)?;
    let log = state.log_text();
    match cfg.optional_path("log") {
        Some(p) => fs::write(&p, &log)
            .map_err(|e| CliError::data(format!("cannot write {}: {e}", p.display())))?,
        None => out.write_all(log.as_bytes())?,
    }
    let model = state.into_model(preprocessor)?;
    save_model(&model, &model_path)?;

    let fits = marginal_fit_report(&model, &data.points)?;
    let report_path = cfg
        .optional_path("report")
        .unwrap_or_else(|| model_path.with_extension("fit.csv"));
    let header = ["dimension", "alpha_hat", "beta_hat", "sym_kl", "degenerate"].map(String::from);
    write_csv(
        &report_path,
        &header,
        fits.iter().enumerate().map(|(k, f)| {
            vec![
                k.to_string(),
                format_f64(f.alpha),
                format_f64(f.beta),
                format_f64(f.sym_kl),
                f.degenerate.to_string(),
            ]
        }),
    )?;
    let mean_fit = fits.iter().map(|f| f.sym_kl).sum::<f64>() / fits.len() as f64;
    let densities = model.log_density_batch(&data.points, threads)?;
    writeln!(
        err,
        "{} mean_sym_kl={}",
        summary_line(&densities),
        format_f64(mean_fit)
    )?;
    Ok(())
}

pub fn eval(cfg: &RunConfig, threads: usize, err: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&cfg.path("model")?)?;
    let out_path = cfg.path("out")?;
    let mut data = load_dataset(cfg, false)?;
    let fraction = cfg.f64_or("corrupt_fraction", 0.0)?;
    if fraction > 0.0 {
        let mut rng = stream_rng(cfg.u64_or("seed", 0)?, CORRUPT_STREAM);
        data.points = mask_elements(&data.points, fraction, &mut rng)?;
    }
    let densities = model.log_density_batch(&data.points, threads)?;
    write_csv(
        &out_path,
        &["log_density".to_string()],
        densities.iter().map(|d| vec![format_f64(d.value())]),
    )?;
    writeln!(err, "{}", summary_line(&densities))?;
    Ok(())
}

pub fn sample(cfg: &RunConfig) -> CliResult<()> {
    let model = load_model(&cfg.path("model")?)?;
    let count = cfg.usize_or("count", 0)?;
    cfg.require("count")?;
    let out_path = cfg.path("out")?;
    let mut rng = stream_rng(cfg.u64_or("seed", 0)?, SAMPLE_STREAM);
    let samples = model.sample(count, &mut rng)?;
    let header: Vec<String> = (0..samples.nrows()).map(|i| format!("x{i}")).collect();
    write_csv(
        &out_path,
        &header,
        samples
            .column_iter()
            .map(|c| c.iter().map(|&v| format_f64(v)).collect()),
    )
}

pub fn entropy(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(&cfg.path("model")?)?;
    let data = load_dataset(cfg, false)?;
    let r = entropy_report(&model, &data.points)?;
    writeln!(
        out,
        "marginal_entropy_sum={}",
        format_f64(r.marginal_entropy_sum)
    )?;
    writeln!(out, "expected_log_det={}", format_f64(r.expected_log_det))?;
    writeln!(
        out,
        "observed_entropy_upper_bound={}",
        format_f64(r.observed_entropy_upper_bound)
    )?;
    writeln!(
        out,
        "original_entropy_upper_bound={}",
        format_f64(r.original_entropy_upper_bound)
    )?;
    match bernoulli_check(&model, &data.points) {
        Ok(b) => {
            writeln!(out, "bernoulli_p={}", format_f64(b.p))?;
            writeln!(out, "bernoulli_expected={}", format_f64(b.expected))?;
            writeln!(out, "bernoulli_empirical={}", format_f64(b.empirical))?;
            writeln!(
                out,
                "bernoulli_ones_fraction={}",
                format_f64(b.ones_fraction)
            )?;
        }
        Err(e) => writeln!(out, "bernoulli_check=unavailable ({e})")?,
    }
    Ok(())
}

pub fn classify_train(cfg: &RunConfig, threads: usize, err: &mut dyn Write) -> CliResult<()> {
    let out_path = cfg.path("out")?;
    let config = ClassifierConfig {
        train: cfg.train_config()?,
        preprocess: cfg.preprocess_options()?,
        foreign_weight: cfg.f64_or("foreign_weight", 0.0)?,
        log_threshold: cfg.f64_or("log_lambda", f64::NEG_INFINITY)?,
        threads,
    };
    let data = load_dataset(cfg, true)?;
    let bundle = train_class_models(&data, &config)?;
    save_classifier(&bundle, &out_path)?;
    for c in &bundle.classes {
        writeln!(
            err,
            "class={} log_prior={}",
            c.label,
            format_f64(c.log_prior)
        )?;
    }
    Ok(())
}

pub fn classify_predict(cfg: &RunConfig, threads: usize, err: &mut dyn Write) -> CliResult<()> {
    let mut bundle = load_classifier(&cfg.path("model")?)?;
    if cfg.get("log_lambda").is_some() {
        bundle.log_threshold = cfg.f64_or("log_lambda", bundle.log_threshold)?;
    }
    let out_path = cfg.path("out")?;
    let data = load_dataset(cfg, true)?;
    let results = bundle.classify_batch(&data.points, threads)?;
    let decisions: Vec<Decision> = results.iter().map(|c| bundle.decide(c)).collect();
    let mut header = vec!["prediction".to_string()];
    header.extend(bundle.labels().iter().map(|l| format!("score_{l}")));
    write_csv(
        &out_path,
        &header,
        results.iter().zip(&decisions).map(|(c, d)| {
            let mut row = vec![match d {
                Decision::Label(l) => l.to_string(),
                Decision::Reject => "REJECT".to_string(),
            }];
            row.extend(c.scores.iter().map(|&s| format_f64(s)));
            row
        }),
    )?;
    let rejected = decisions.iter().filter(|d| **d == Decision::Reject).count();
    write!(err, "rejected={}/{}", rejected, decisions.len())?;
    if let Some(labels) = &data.labels {
        let n = labels.len() as f64;
        let correct = results
            .iter()
            .zip(labels)
            .filter(|(c, &l)| c.label == Some(l))
            .count();
        let accepted_correct = decisions
            .iter()
            .zip(labels)
            .filter(|(d, &l)| **d == Decision::Label(l))
            .count();
        let accepted = decisions.len() - rejected;
        write!(err, " accuracy={}", format_f64(correct as f64 / n))?;
        if accepted > 0 {
            write!(
                err,
                " accepted_accuracy={}",
                format_f64(accepted_correct as f64 / accepted as f64)
            )?;
        }
    }
    writeln!(err)?;
    Ok(())
}
