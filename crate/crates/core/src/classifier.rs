//! Generative classification with one density model per class: Bayes-rule
//! decisions, density-threshold rejection, and optional foreign-example
//! penalties during training.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::thread;

use log::info;
use nalgebra::{DMatrix, DVector};

use crate::data::persist::{decode_model, encode_model};
use crate::data::{Dataset, PreprocessOptions, Preprocessor};
use crate::density::{LogDensity, ModelBundle};
use crate::error::{Error, Result};
use crate::trainer::{train, ForeignConfig, TrainConfig, TrainState};

pub const CLASSIFIER_MAGIC: &[u8; 8] = b"DDMCLS01";
pub const CLASSIFIER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    pub label: i64,
    pub log_prior: f64,
    pub model: ModelBundle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBundle {
    /// Ascending by label.
    pub classes: Vec<ClassModel>,
    /// ln λ: a point is rejected when every class log-density is below it.
    pub log_threshold: f64,
    pub foreign_weight: f64,
}

/// Outcome of classifying one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// Best label, or `None` when every class assigns zero density.
    pub label: Option<i64>,
    /// Per class (ascending label): log-density and log-joint score.
    pub log_densities: Vec<LogDensity>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Label(i64),
    Reject,
}

/// Argmax over scores with ties resolved towards the first (smallest)
/// label; `None` if every score is −∞.
pub fn argmax_label(labels: &[i64], scores: &[f64]) -> Option<i64> {
    let mut best: Option<(i64, f64)> = None;
    for (&l, &s) in labels.iter().zip(scores) {
        if s == f64::NEG_INFINITY || s.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((l, s));
        }
    }
    best.map(|(l, _)| l)
}

impl ClassifierBundle {
    pub fn new(classes: Vec<ClassModel>, log_threshold: f64, foreign_weight: f64) -> Result<Self> {
        let Some(first) = classes.first() else {
            return Err(Error::Config(
                "a classifier needs at least one class".into(),
            ));
        };
        let dim = first.model.input_dim();
        for pair in classes.windows(2) {
            if pair[0].label >= pair[1].label {
                return Err(Error::Config(
                    "class labels must be unique and ascending".into(),
                ));
            }
        }
        for c in &classes {
            if c.model.input_dim() != dim {
                return Err(Error::DimensionMismatch {
                    what: "class model input dimension",
                    expected: dim,
                    got: c.model.input_dim(),
                });
            }
        }
        if log_threshold.is_nan() || !(foreign_weight >= 0.0) {
            return Err(Error::Config(
                "invalid rejection threshold or foreign weight".into(),
            ));
        }
        Ok(Self {
            classes,
            log_threshold,
            foreign_weight,
        })
    }

    pub fn labels(&self) -> Vec<i64> {
        self.classes.iter().map(|c| c.label).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.classes[0].model.input_dim()
    }

    fn classification_of(&self, log_densities: Vec<LogDensity>) -> Classification {
        let scores: Vec<f64> = log_densities
            .iter()
            .zip(&self.classes)
            .map(|(d, c)| d.value() + c.log_prior)
            .collect();
        Classification {
            label: argmax_label(&self.labels(), &scores),
            log_densities,
            scores,
        }
    }

    /// Bayes-rule classification of one point in original coordinates.
    pub fn classify(&self, y: &DVector<f64>) -> Result<Classification> {
        let densities = self
            .classes
            .iter()
            .map(|c| c.model.log_density(y))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.classification_of(densities))
    }

    /// Rejects when every class log-density is below the threshold (or the
    /// point is outside every class's support); otherwise the Bayes label.
    pub fn decide(&self, c: &Classification) -> Decision {
        let confident = c
            .log_densities
            .iter()
            .any(|d| d.value() >= self.log_threshold);
        match c.label {
            Some(l) if confident => Decision::Label(l),
            _ => Decision::Reject,
        }
    }

    pub fn classify_with_reject(&self, y: &DVector<f64>) -> Result<(Decision, Classification)> {
        let c = self.classify(y)?;
        Ok((self.decide(&c), c))
    }

    /// Classifies every column; per-class density work is spread over up to
    /// `threads` workers with deterministic output order.
    pub fn classify_batch(
        &self,
        data: &DMatrix<f64>,
        threads: usize,
    ) -> Result<Vec<Classification>> {
        let per_class = self
            .classes
            .iter()
            .map(|c| c.model.log_density_batch(data, threads))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..data.ncols())
            .map(|j| self.classification_of(per_class.iter().map(|d| d[j]).collect()))
            .collect())
    }
}

/// Settings for training a classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub train: TrainConfig,
    pub preprocess: PreprocessOptions,
    pub foreign_weight: f64,
    /// Rejection threshold in log-density units.
    pub log_threshold: f64,
    /// Classes trained concurrently; results do not depend on it.
    pub threads: usize,
}

fn train_one(
    config: &ClassifierConfig,
    label: i64,
    own: &DMatrix<f64>,
    foreign: &DMatrix<f64>,
) -> Result<TrainState> {
    if own.ncols() < 2 {
        return Err(Error::Data(format!(
            "class {label} has {} examples; need at least 2",
            own.ncols()
        )));
    }
    let foreign = (config.foreign_weight > 0.0).then_some(ForeignConfig {
        points: foreign,
        weight: config.foreign_weight,
        margin: None,
    });
    info!("training class {label} on {} examples", own.ncols());
    train(&config.train, own, foreign).map_err(|e| Error::ClassTraining {
        label,
        source: Box::new(e),
    })
}

/// Trains one model per class on a shared preprocessing of all examples.
/// Priors are the empirical class frequencies.
pub fn train_class_models(data: &Dataset, config: &ClassifierConfig) -> Result<ClassifierBundle> {
    let groups = data.indices_by_label()?;
    let preprocessor = Preprocessor::fit(&data.points, config.preprocess)?;
    let pre = preprocessor.apply_batch(&data.points)?;
    let n = data.len() as f64;
    let per_class: Vec<(i64, DMatrix<f64>, DMatrix<f64>, f64)> = groups
        .iter()
        .map(|(&label, idx)| {
            let others: Vec<usize> = groups
                .iter()
                .filter(|(&l, _)| l != label)
                .flat_map(|(_, i)| i.iter().copied())
                .collect();
            (
                label,
                pre.select_columns(idx.iter()),
                pre.select_columns(others.iter()),
                (idx.len() as f64 / n).ln(),
            )
        })
        .collect();

    let threads = config.threads.max(1);
    let mut states: Vec<Result<TrainState>> = Vec::with_capacity(per_class.len());
    for chunk in per_class.chunks(threads) {
        if threads == 1 {
            let (label, own, foreign, _) = &chunk[0];
            states.push(train_one(config, *label, own, foreign));
            continue;
        }
        let results: Vec<Result<TrainState>> = thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(label, own, foreign, _)| {
                    s.spawn(move || train_one(config, *label, own, foreign))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("class training panicked"))
                .collect()
        });
        states.extend(results);
    }

    let mut classes = Vec::with_capacity(per_class.len());
    for ((label, _, _, log_prior), state) in per_class.into_iter().zip(states) {
        classes.push(ClassModel {
            label,
            log_prior,
            model: state?.into_model(preprocessor.clone())?,
        });
    }
    ClassifierBundle::new(classes, config.log_threshold, config.foreign_weight)
}

/// Serialized layout: magic, version (u32), class count (u32), ln λ,
/// foreign weight, then per class: label (i64), log prior, model length
/// (u64) and the model bytes. Little-endian throughout.
pub fn encode_classifier(bundle: &ClassifierBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CLASSIFIER_MAGIC);
    out.extend_from_slice(&CLASSIFIER_VERSION.to_le_bytes());
    out.extend_from_slice(&(bundle.classes.len() as u32).to_le_bytes());
    out.extend_from_slice(&bundle.log_threshold.to_le_bytes());
    out.extend_from_slice(&bundle.foreign_weight.to_le_bytes());
    for c in &bundle.classes {
        let model = encode_model(&c.model);
        out.extend_from_slice(&c.label.to_le_bytes());
        out.extend_from_slice(&c.log_prior.to_le_bytes());
        out.extend_from_slice(&(model.len() as u64).to_le_bytes());
        out.extend_from_slice(&model);
    }
    out
}

pub fn decode_classifier(bytes: &[u8]) -> Result<ClassifierBundle> {
    let mut offset = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let chunk = bytes.get(offset..offset + n).ok_or_else(|| {
            Error::ModelFormat(format!("truncated classifier file at byte {offset}"))
        })?;
        offset += n;
        Ok(chunk)
    };
    if take(8)? != CLASSIFIER_MAGIC {
        return Err(Error::ModelFormat(
            "bad magic; not a classifier file".into(),
        ));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CLASSIFIER_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported classifier version {version}"
        )));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let log_threshold = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let foreign_weight = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let mut classes = Vec::new();
    for _ in 0..count {
        let label = i64::from_le_bytes(take(8)?.try_into().unwrap());
        let log_prior = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let model = decode_model(take(len)?)?;
        classes.push(ClassModel {
            label,
            log_prior,
            model,
        });
    }
    if offset != bytes.len() {
        return Err(Error::ModelFormat("trailing bytes after classifier".into()));
    }
    ClassifierBundle::new(classes, log_threshold, foreign_weight)
}

pub fn save_classifier(bundle: &ClassifierBundle, path: &Path) -> Result<()> {
    fs::write(path, encode_classifier(bundle)).map_err(Error::io(path))?;
    Ok(())
}

pub fn load_classifier(path: &Path) -> Result<ClassifierBundle> {
    decode_classifier(&fs::read(path).map_err(Error::io(path))?)
}

/// Per-label groups of the rows of `data` with their counts.
pub fn class_counts(data: &Dataset) -> Result<BTreeMap<i64, usize>> {
    Ok(data
        .indices_by_label()?
        .into_iter()
        .map(|(l, i)| (l, i.len()))
        .collect())
}
