//! Datasets, loaders, preprocessing and model persistence.

pub mod idx;
pub mod persist;
pub mod preprocess;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

pub use idx::load_idx;
pub use persist::{load_model, save_model};
pub use preprocess::{PreprocessOptions, Preprocessor, Projection};

/// Observed examples, one per column, with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: DMatrix<f64>,
    pub labels: Option<Vec<i64>>,
    pub source: String,
}

impl Dataset {
    pub fn new(
        points: DMatrix<f64>,
        labels: Option<Vec<i64>>,
        source: impl Into<String>,
    ) -> Result<Self> {
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        if let Some(l) = &labels {
            if l.len() != points.ncols() {
                return Err(Error::Data(format!(
                    "{} labels for {} examples",
                    l.len(),
                    points.ncols()
                )));
            }
        }
        Ok(Self {
            points,
            labels,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    /// Examples at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            points: self.points.select_columns(indices.iter()),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            source: self.source.clone(),
        }
    }

    /// Column indices grouped by label, labels ascending.
    pub fn indices_by_label(&self) -> Result<BTreeMap<i64, Vec<usize>>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("dataset {} has no labels", self.source)))?;
        let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        Ok(groups)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CsvOptions {
    pub header: bool,
    /// The last column holds an integer label.
    pub labels: bool,
}

/// Parses numeric CSV text, one example per row.
pub fn parse_csv(text: &str, options: CsvOptions, source: &str) -> Result<Dataset> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    let mut offset = 0u64;
    let mut lines = text.lines();
    if options.header {
        if let Some(h) = lines.next() {
            offset += h.len() as u64 + 1;
        }
    }
    for line in lines {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut values = Vec::new();
        for field in trimmed.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                offset: line_offset,
                message: format!("not a number: {field:?}"),
            })?;
            values.push(v);
        }
        if options.labels {
            let l = values.pop().ok_or_else(|| Error::Parse {
                offset: line_offset,
                message: "missing label column".into(),
            })?;
            if l.fract() != 0.0 {
                return Err(Error::Parse {
                    offset: line_offset,
                    message: format!("label {l} is not an integer"),
                });
            }
            labels.push(l as i64);
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Parse {
                    offset: line_offset,
                    message: format!("row has {} values, expected {w}", values.len()),
                })
            }
            _ => {}
        }
        rows.push(values);
    }
    let d = width.unwrap_or(0);
    let points = DMatrix::from_fn(d, rows.len(), |i, j| rows[j][i]);
    Dataset::new(points, options.labels.then_some(labels), source)
}

pub fn load_csv(path: &Path, options: CsvOptions) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_csv(&text, options, &format!("csv:{}", path.display()))
}

/// Sets ⌈fraction·D⌉ distinct, uniformly chosen elements of every example
/// to zero.
pub fn mask_elements<R: Rng + ?Sized>(
    points: &DMatrix<f64>,
    fraction: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "corruption fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let d = points.nrows();
    let count = ((fraction * d as f64).ceil() as usize).min(d);
    let mut out = points.clone();
    for mut column in out.column_iter_mut() {
        for i in sample(rng, d, count) {
            column[i] = 0.0;
        }
    }
    Ok(out)
}

/// Round-trippable decimal rendering (17 significant digits).
pub fn format_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}
