//! Normalization, cosine similarity and angles between features and class weights.
//!
//! Cosines are computed between unit vectors and clamped to `[-1, 1]` so that
//! `acos` never sees floating-point overshoot.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{dot, norm, Matrix};

/// Norms at or below this are rejected as having no direction.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("vector has norm {norm:e}, at or below the zero threshold")]
    ZeroVector { norm: f64 },
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
}

/// A mini-batch of raw (unnormalized) feature rows with their class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBatch {
    features: Matrix,
    labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self, GeometryError> {
        if features.rows() == 0 {
            return Err(GeometryError::InvalidShape("batch must have at least one row".into()));
        }
        if features.cols() < 2 {
            return Err(GeometryError::InvalidShape(format!(
                "feature dimension must be >= 2, got {}",
                features.cols()
            )));
        }
        if labels.len() != features.rows() {
            return Err(GeometryError::DimensionMismatch {
                what: "labels vs feature rows",
                expected: features.rows(),
                got: labels.len(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut Matrix {
        &mut self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// The final classification layer: one weight row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeightMatrix {
    weights: Matrix,
}

impl ClassWeightMatrix {
    /// Requires at least three classes; with two the fixed scale `√2·ln(C−1)` is zero.
    pub fn new(weights: Matrix) -> Result<Self, GeometryError> {
        if weights.rows() < 3 {
            return Err(GeometryError::InvalidShape(format!(
                "need at least 3 classes, got {}",
                weights.rows()
            )));
        }
        if weights.cols() < 2 {
            return Err(GeometryError::InvalidShape(format!(
                "weight dimension must be >= 2, got {}",
                weights.cols()
            )));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn into_matrix(self) -> Matrix {
        self.weights
    }
}

/// `cos θ_{i,j}` for every (sample, class) pair, clamped to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineMatrix(Matrix);

impl CosineMatrix {
    /// Wraps precomputed cosines, clamping each entry into `[-1, 1]`.
    pub fn from_matrix(m: Matrix) -> Self {
        Self(m.map(|c| c.clamp(-1.0, 1.0)))
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }
}

/// `θ_{i,j} = acos(cos θ_{i,j})` in radians, each in `[0, π]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleMatrix(Matrix);

impl AngleMatrix {
    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>, GeometryError> {
    let n = norm(v);
    if !(n > EPS_NORM) {
        return Err(GeometryError::ZeroVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Unit-normalizes every row, returning the normalized matrix and the original norms.
pub fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>), GeometryError> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if !(n > EPS_NORM) {
            return Err(GeometryError::ZeroVector { norm: n });
        }
        out.row_mut(i).iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Cosine between every pair of rows of two unit-row matrices, clamped.
pub(crate) fn unit_cosines(x_hat: &Matrix, w_hat: &Matrix) -> Matrix {
    Matrix::from_fn(x_hat.rows(), w_hat.rows(), |i, j| {
        dot(x_hat.row(i), w_hat.row(j)).clamp(-1.0, 1.0)
    })
}

pub(crate) fn check_labels(labels: &[usize], classes: usize) -> Result<(), GeometryError> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(GeometryError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

pub fn cosine_matrix(
    batch: &EmbeddingBatch,
    weights: &ClassWeightMatrix,
) -> Result<CosineMatrix, GeometryError> {
    if batch.dim() != weights.dim() {
        return Err(GeometryError::DimensionMismatch {
            what: "feature vs weight dimension",
            expected: weights.dim(),
            got: batch.dim(),
        });
    }
    check_labels(batch.labels(), weights.classes())?;
    let (x_hat, _) = normalize_rows(batch.features())?;
    let (w_hat, _) = normalize_rows(weights.weights())?;
    Ok(CosineMatrix(unit_cosines(&x_hat, &w_hat)))
}

pub fn angles(cos: &CosineMatrix) -> AngleMatrix {
    AngleMatrix(cos.0.map(f64::acos))
}

/// Per-batch angle telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleStats {
    /// Median of the target-class angles `θ_{i,y_i}`.
    pub median_corr: f64,
    pub mean_corr: f64,
    /// Mean over all `(i, j ≠ y_i)`. NaN if there are no non-target entries.
    pub mean_noncorr: f64,
}

/// Median with the midpoint convention for even counts. NaN for empty input.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn angle_stats(angles: &AngleMatrix, labels: &[usize]) -> Result<AngleStats, GeometryError> {
    let m = angles.values();
    if labels.len() != m.rows() {
        return Err(GeometryError::DimensionMismatch {
            what: "labels vs angle rows",
            expected: m.rows(),
            got: labels.len(),
        });
    }
    if m.rows() == 0 {
        return Err(GeometryError::InvalidShape("empty angle matrix".into()));
    }
    check_labels(labels, m.cols())?;

    let corr: Vec<f64> = labels.iter().enumerate().map(|(i, &y)| m[(i, y)]).collect();
    let mean_corr = corr.iter().sum::<f64>() / corr.len() as f64;

    let mut noncorr_sum = 0.0;
    let mut noncorr_count = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        for (j, &a) in m.row(i).iter().enumerate() {
            if j != y {
                noncorr_sum += a;
                noncorr_count += 1;
            }
        }
    }
    let mean_noncorr = if noncorr_count == 0 {
        f64::NAN
    } else {
        noncorr_sum / noncorr_count as f64
    };

    Ok(AngleStats {
        median_corr: median(&corr),
        mean_corr,
        mean_noncorr,
    })
}
