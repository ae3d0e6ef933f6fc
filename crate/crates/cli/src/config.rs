//! Flat `key = value` run configuration with `#` comments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ddm_core::trainer::{ArmijoConfig, WeightRatios};
use ddm_core::{
    BetaParams, CsvOptions, PenaltyWeights, PreprocessOptions, TargetSchedule, TrainConfig,
};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Sample,
    Entropy,
    ClassifyTrain,
    ClassifyPredict,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sample => "sample",
            Command::Entropy => "entropy",
            Command::ClassifyTrain => "classify train",
            Command::ClassifyPredict => "classify predict",
        }
    }
}

/// Keys understood by the training commands.
const TRAINING_KEYS: &[&str] = &[
    "decoder_layers",
    "encoder_widths",
    "target_alpha",
    "target_beta",
    "initial_alpha",
    "advance_tolerance",
    "interpolation_steps",
    "noise_rate",
    "window_size",
    "window_stride",
    "armijo_c",
    "armijo_backtrack",
    "max_backtracks",
    "initial_step",
    "ratio_divergence",
    "ratio_invertibility",
    "ratio_reconstruction",
    "ratio_update_period",
    "mu_divergence",
    "mu_invertibility",
    "mu_reconstruction",
    "epochs",
    "pretrain_epochs",
    "seed",
    "epsilon_threshold",
    "center_init_bias",
    "example_divergence",
    "whiten",
    "pca_dim",
    "margin",
];

/// Keys describing an input data set.
const DATA_KEYS: &[&str] = &["data", "format", "labels", "csv_header", "csv_labels"];

fn command_keys(command: Command) -> Vec<&'static str> {
    let mut keys: Vec<&'static str> = Vec::new();
    match command {
        Command::Train => {
            keys.extend(TRAINING_KEYS);
            keys.extend(DATA_KEYS);
            keys.extend(["out", "log", "report"]);
        }
        Command::Eval => {
            keys.extend(DATA_KEYS);
            keys.extend(["model", "out", "corrupt_fraction", "seed"]);
        }
        Command::Sample => keys.extend(["model", "count", "seed", "out"]),
        Command::Entropy => {
            keys.extend(DATA_KEYS);
            keys.push("model");
        }
        Command::ClassifyTrain => {
            keys.extend(TRAINING_KEYS);
            keys.extend(DATA_KEYS);
            keys.extend(["out", "log_lambda", "foreign_weight"]);
        }
        Command::ClassifyPredict => {
            keys.extend(DATA_KEYS);
            keys.extend(["model", "out", "log_lambda"]);
        }
    }
    keys
}

/// Validated key/value settings for one command. Later assignments override
/// earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    command: Command,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            values: BTreeMap::new(),
        }
    }

    pub fn command(&self) -> Command {
        self.command
    }

    /// Sets one key, rejecting keys the command does not understand.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let key = key.trim();
        if !command_keys(self.command).contains(&key) {
            return Err(CliError::config(format!(
                "unknown key {key:?} for command {}",
                self.command.name()
            )));
        }
        self.values
            .insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn set_assignment(&mut self, assignment: &str) -> CliResult<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("expected key=value, got {assignment:?}")))?;
        self.set(key, value)
    }

    /// Applies every assignment in config-file text.
    pub fn merge_text(&mut self, text: &str, source: &str) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_assignment(line)
                .map_err(|e| CliError::config(format!("{source}:{}: {}", i + 1, e.message)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> CliResult<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> CliResult<&str> {
        self.get(key).ok_or_else(|| {
            CliError::config(format!(
                "missing required key {key:?} for command {}",
                self.command.name()
            ))
        })
    }

    pub fn path(&self, key: &str) -> CliResult<PathBuf> {
        self.require(key).map(PathBuf::from)
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| CliError::config(format!("key {key:?}: cannot parse {v:?}")))
            })
            .transpose()
    }

    pub fn f64_or(&self, key: &str, default: f64) -> CliResult<f64> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> CliResult<usize> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> CliResult<u64> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> CliResult<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(CliError::config(format!(
                "key {key:?}: expected a boolean, got {v:?}"
            ))),
        }
    }

    pub fn required_f64(&self, key: &str) -> CliResult<f64> {
        self.require(key)?;
        self.f64_or(key, 0.0)
    }

    /// Training settings; `target_alpha` and `target_beta` are required.
    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let final_target = BetaParams::new(
            self.required_f64("target_alpha")?,
            self.required_f64("target_beta")?,
        )
        .map_err(|e| CliError::config(e.to_string()))?;
        let schedule = TargetSchedule::with_constant_mean(
            final_target,
            self.f64_or("initial_alpha", 2.0)?,
            self.f64_or("advance_tolerance", 0.1)?,
            self.usize_or("interpolation_steps", 12)?,
        )
        .map_err(|e| CliError::config(e.to_string()))?;
        let mut c = TrainConfig::new(schedule);
        c.decoder_layers = self.usize_or("decoder_layers", c.decoder_layers)?;
        if let Some(w) = self.get("encoder_widths") {
            c.encoder_widths = w
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        CliError::config(format!("encoder_widths: cannot parse {s:?}"))
                    })
                })
                .collect::<CliResult<_>>()?;
        }
        c.noise_rate = self.f64_or("noise_rate", c.noise_rate)?;
        c.window_size = self.usize_or("window_size", c.window_size)?;
        c.window_stride = self.parse("window_stride")?;
        let d = ArmijoConfig::default();
        c.armijo = ArmijoConfig {
            c: self.f64_or("armijo_c", d.c)?,
            backtrack: self.f64_or("armijo_backtrack", d.backtrack)?,
            max_backtracks: self.usize_or("max_backtracks", d.max_backtracks)?,
            initial_step: self.f64_or("initial_step", d.initial_step)?,
        };
        let r = WeightRatios::default();
        c.ratios = WeightRatios {
            divergence: self.f64_or("ratio_divergence", r.divergence)?,
            invertibility: self.f64_or("ratio_invertibility", r.invertibility)?,
            reconstruction: self.f64_or("ratio_reconstruction", r.reconstruction)?,
        };
        c.ratio_update_period = self.usize_or("ratio_update_period", c.ratio_update_period)?;
        let w = c.initial_weights;
        c.initial_weights = PenaltyWeights::new(
            self.f64_or("mu_divergence", w.divergence)?,
            self.f64_or("mu_invertibility", w.invertibility)?,
            self.f64_or("mu_reconstruction", w.reconstruction)?,
        )
        .map_err(|e| CliError::config(e.to_string()))?;
        c.epochs = self.usize_or("epochs", c.epochs)?;
        c.pretrain_epochs = self.usize_or("pretrain_epochs", c.pretrain_epochs)?;
        c.seed = self.u64_or("seed", c.seed)?;
        c.epsilon_threshold = self.f64_or("epsilon_threshold", c.epsilon_threshold)?;
        c.center_init_bias = self.bool_or("center_init_bias", c.center_init_bias)?;
        c.example_divergence = match self.get("example_divergence") {
            None | Some("auto") => None,
            Some(_) => Some(self.bool_or("example_divergence", false)?),
        };
        Ok(c)
    }

    pub fn preprocess_options(&self) -> CliResult<PreprocessOptions> {
        let d = PreprocessOptions::default();
        Ok(PreprocessOptions {
            whiten: self.bool_or("whiten", d.whiten)?,
            pca_dim: self.parse("pca_dim")?,
            margin: self.f64_or("margin", d.margin)?,
        })
    }

    /// CSV parsing options; labels default to on for labelled commands.
    pub fn csv_options(&self, labels_default: bool) -> CliResult<CsvOptions> {
        Ok(CsvOptions {
            header: self.bool_or("csv_header", false)?,
            labels: self.bool_or("csv_labels", labels_default)?,
        })
    }
}
