//! Centering, optional PCA, per-dimension scaling and the affine squash into
//! `[margin, 1 − margin]` that carries observed data into the decoder's
//! open unit cube. The map's constant log-Jacobian is exposed so densities
//! stay normalized in the original coordinates.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative variance below which a dimension or principal component is
/// considered constant and dropped.
const ZERO_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessOptions {
    /// Scale each retained dimension to unit variance.
    pub whiten: bool,
    /// Project onto this many leading principal components.
    pub pca_dim: Option<usize>,
    pub margin: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            whiten: false,
            pca_dim: None,
            margin: 0.05,
        }
    }
}

/// How retained coordinates are obtained from centered input.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    /// Keep these input dimensions, in order.
    Select(Vec<usize>),
    /// Orthonormal D×K basis of leading principal components.
    Pca(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub mean: DVector<f64>,
    pub projection: Projection,
    /// Per retained dimension.
    pub scale: DVector<f64>,
    pub squash_low: DVector<f64>,
    pub squash_high: DVector<f64>,
    pub margin: f64,
}

impl Preprocessor {
    /// The identity-like preprocessor on `[margin, 1 − margin]`-ranged data:
    /// no centering, no scaling, and a squash of `[low, high] = [margin, 1 − margin]`.
    pub fn identity(dim: usize, margin: f64) -> Self {
        Self {
            mean: DVector::zeros(dim),
            projection: Projection::Select((0..dim).collect()),
            scale: DVector::from_element(dim, 1.0),
            squash_low: DVector::from_element(dim, margin),
            squash_high: DVector::from_element(dim, 1.0 - margin),
            margin,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.scale.len()
    }

    pub fn dropped_dims(&self) -> Vec<usize> {
        match &self.projection {
            Projection::Select(keep) => (0..self.input_dim())
                .filter(|d| !keep.contains(d))
                .collect(),
            Projection::Pca(_) => Vec::new(),
        }
    }

    /// Fits on `data`, one example per column.
    pub fn fit(data: &DMatrix<f64>, options: PreprocessOptions) -> Result<Self> {
        let (d, n) = data.shape();
        if n < 2 {
            return Err(Error::Data(format!(
                "preprocessing needs at least 2 examples, got {n}"
            )));
        }
        if !(options.margin > 0.0 && options.margin < 0.5) {
            return Err(Error::Config(format!(
                "margin must lie in (0, 0.5), got {}",
                options.margin
            )));
        }
        let mean = data.column_mean();
        let mut centered = data.clone();
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        let variances = centered
            .row_iter()
            .map(|r| r.norm_squared() / (n - 1) as f64)
            .collect::<Vec<_>>();
        let max_var = variances.iter().cloned().fold(0.0, f64::max);

        let (projection, projected) = match options.pca_dim {
            Some(k) => {
                if k == 0 || k > d {
                    return Err(Error::Config(format!(
                        "PCA dimension {k} must lie in 1..={d}"
                    )));
                }
                let cov = &centered * centered.transpose() / (n - 1) as f64;
                let eig = SymmetricEigen::new(cov);
                let mut order: Vec<usize> = (0..d).collect();
                order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
                let top = eig.eigenvalues[order[0]].max(f64::MIN_POSITIVE);
                let mut cols = Vec::with_capacity(k);
                for &i in order.iter().take(k) {
                    if eig.eigenvalues[i] <= ZERO_VARIANCE * top {
                        warn!(
                            "principal component {} has zero variance; dropped",
                            cols.len()
                        );
                        continue;
                    }
                    let mut v = eig.eigenvectors.column(i).into_owned();
                    // Deterministic sign: largest-magnitude entry positive.
                    let imax = v.iamax();
                    if v[imax] < 0.0 {
                        v.neg_mut();
                    }
                    cols.push(v);
                }
                if cols.is_empty() {
                    return Err(Error::Data(
                        "all principal components have zero variance".into(),
                    ));
                }
                let basis = DMatrix::from_columns(&cols);
                let projected = basis.tr_mul(&centered);
                (Projection::Pca(basis), projected)
            }
            None => {
                let keep: Vec<usize> = (0..d)
                    .filter(|&i| variances[i] > ZERO_VARIANCE * max_var.max(f64::MIN_POSITIVE))
                    .collect();
                if keep.len() < d {
                    warn!(
                        "dropping {} zero-variance input dimension(s)",
                        d - keep.len()
                    );
                }
                if keep.is_empty() {
                    return Err(Error::Data(
                        "every input dimension has zero variance".into(),
                    ));
                }
                let projected = centered.select_rows(keep.iter());
                (Projection::Select(keep), projected)
            }
        };

        let k = projected.nrows();
        let scale = if options.whiten {
            DVector::from_fn(k, |i, _| {
                (projected.row(i).norm_squared() / (n - 1) as f64).sqrt()
            })
        } else {
            DVector::from_element(k, 1.0)
        };
        let mut scaled = projected;
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row /= scale[i];
        }
        let squash_low = DVector::from_fn(k, |i, _| scaled.row(i).min());
        let squash_high = DVector::from_fn(k, |i, _| scaled.row(i).max());
        Ok(Self {
            mean,
            projection,
            scale,
            squash_low,
            squash_high,
            margin: options.margin,
        })
    }

    fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        let centered = u - &self.mean;
        match &self.projection {
            Projection::Select(keep) => {
                DVector::from_iterator(keep.len(), keep.iter().map(|&i| centered[i]))
            }
            Projection::Pca(basis) => basis.tr_mul(&centered),
        }
    }

    fn squash_slope(&self, i: usize) -> f64 {
        (1.0 - 2.0 * self.margin) / (self.squash_high[i] - self.squash_low[i])
    }

    /// Original coordinates → the model's unit cube (no clamping).
    pub fn apply(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "preprocessor input",
                expected: self.input_dim(),
                got: u.len(),
            });
        }
        let z = self.project(u);
        Ok(DVector::from_fn(z.len(), |i, _| {
            self.margin + self.squash_slope(i) * (z[i] / self.scale[i] - self.squash_low[i])
        }))
    }

    /// Like [`apply`](Self::apply), but coordinates at or beyond the cube faces are pulled
    /// onto the margin. Returns whether any clamping happened.
    pub fn apply_clamped(&self, u: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
        let mut y = self.apply(u)?;
        let mut clamped = false;
        for v in y.iter_mut() {
            if !(*v > 0.0 && *v < 1.0) {
                *v = if *v >= 1.0 {
                    1.0 - self.margin
                } else {
                    self.margin
                };
                clamped = true;
            }
        }
        Ok((y, clamped))
    }

    /// Applies to every column of `data`, clamping with a single warning.
    pub fn apply_batch(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.output_dim(), data.ncols());
        let mut count = 0;
        for (j, col) in data.column_iter().enumerate() {
            let (y, clamped) = self.apply_clamped(&col.into_owned())?;
            count += clamped as usize;
            out.set_column(j, &y);
        }
        if count > 0 {
            warn!(
                "{count} point(s) fell outside the unit cube after preprocessing and were clamped"
            );
        }
        Ok(out)
    }

    /// Unit cube → original coordinates. Dropped input dimensions are
    /// restored to their training mean.
    pub fn invert(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "preprocessor output",
                expected: self.output_dim(),
                got: y.len(),
            });
        }
        if let Some(&bad) = y.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::domain("preprocessor invert", bad));
        }
        let z = DVector::from_fn(y.len(), |i, _| {
            ((y[i] - self.margin) / self.squash_slope(i) + self.squash_low[i]) * self.scale[i]
        });
        Ok(match &self.projection {
            Projection::Select(keep) => {
                let mut u = self.mean.clone();
                for (i, &dim) in keep.iter().enumerate() {
                    u[dim] += z[i];
                }
                u
            }
            Projection::Pca(basis) => basis * z + &self.mean,
        })
    }

    pub fn invert_batch(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.input_dim(), y.ncols());
        for (j, col) in y.column_iter().enumerate() {
            out.set_column(j, &self.invert(&col.into_owned())?);
        }
        Ok(out)
    }

    /// ln |det| of the forward map restricted to the retained coordinates:
    /// Σ_k [ln(squash slope_k) − ln(scale_k)]. Rotations contribute nothing.
    pub fn log_det(&self) -> f64 {
        (0..self.output_dim())
            .map(|i| self.squash_slope(i).ln() - self.scale[i].ln())
            .sum()
    }
}
