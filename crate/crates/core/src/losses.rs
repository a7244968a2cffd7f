//! Logits, softmax probabilities, cross-entropy and analytic gradients for the
//! softmax loss family.
//!
//! | kind             | logit `f_{i,j}`                              |
//! |------------------|----------------------------------------------|
//! | `softmax`        | `⟨W_j, x_i⟩` on raw vectors                  |
//! | `scaled-cosine`  | `s·cos θ_{i,j}`                              |
//! | `cosface`        | `s·(cos θ_{i,j} − m·𝟙{j = y_i})`             |
//! | `arcface`        | `s·cos(θ_{i,j} + m·𝟙{j = y_i})`              |
//! | `adacos-fixed`   | `s̃·cos θ_{i,j}`, `s̃ = √2·ln(C−1)`             |
//! | `adacos-dynamic` | `s̃⁽ᵗ⁾·cos θ_{i,j}`, `s̃⁽ᵗ⁾` from [`crate::adaptive_scale`] |
//!
//! The AdaCos kinds never carry a scale of their own; callers pass the current
//! scale as `scale_override`.
//!
//! Gradients are taken with respect to the raw (unnormalized) features and
//! class weights. For the cosine kinds the chain runs through normalization:
//!
//! ```text
//! ∂cos θ_ij/∂x_i = (Ŵ_j − cos θ_ij·x̂_i) / ‖x_i‖
//! ∂cos θ_ij/∂W_j = (x̂_i − cos θ_ij·Ŵ_j) / ‖W_j‖
//! ```
//!
//! and for the ArcFace target logit `∂f/∂cos θ = s·sin(θ + m) / sin θ`, with
//! `sin θ` floored at [`ARCFACE_SIN_FLOOR`].

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use thiserror::Error;

use crate::geometry::{
    check_labels, normalize_rows, unit_cosines, AngleMatrix, ClassWeightMatrix, CosineMatrix,
    EmbeddingBatch, GeometryError,
};
use crate::matrix::{dot, Matrix};

/// Lower bound applied to `sin θ` in the ArcFace target-logit derivative.
pub const ARCFACE_SIN_FLOOR: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{0} needs a scale override carrying the current adaptive scale")]
    MissingScale(LossKind),
    #[error("invalid scale {0}: must be finite and > 0")]
    InvalidScale(f64),
    #[error("invalid margin {margin} for {kind}: allowed range is [0, {max})")]
    InvalidMargin { kind: LossKind, margin: f64, max: f64 },
    #[error("plain softmax logits are inner products of raw vectors; use inner_product_logits")]
    RequiresRawInputs,
    #[error("degenerate angle: sin θ = {sin_theta:e} at sample {sample} (singularity guard disabled)")]
    DegenerateAngle { sample: usize, sin_theta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[serde(rename = "softmax")]
    PlainSoftmax,
    ScaledCosine,
    #[serde(rename = "cosface")]
    CosFaceMargin,
    #[serde(rename = "arcface")]
    ArcFaceMargin,
    #[serde(rename = "adacos-fixed")]
    AdaCosFixed,
    #[serde(rename = "adacos-dynamic")]
    AdaCosDynamic,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::PlainSoftmax,
        LossKind::ScaledCosine,
        LossKind::CosFaceMargin,
        LossKind::ArcFaceMargin,
        LossKind::AdaCosFixed,
        LossKind::AdaCosDynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::PlainSoftmax => "softmax",
            LossKind::ScaledCosine => "scaled-cosine",
            LossKind::CosFaceMargin => "cosface",
            LossKind::ArcFaceMargin => "arcface",
            LossKind::AdaCosFixed => "adacos-fixed",
            LossKind::AdaCosDynamic => "adacos-dynamic",
        }
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, LossKind::AdaCosFixed | LossKind::AdaCosDynamic)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A loss family member together with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum LossSpec {
    #[serde(rename = "softmax")]
    PlainSoftmax,
    #[serde(rename = "scaled-cosine")]
    ScaledCosine { scale: f64 },
    #[serde(rename = "cosface")]
    CosFaceMargin { scale: f64, margin: f64 },
    #[serde(rename = "arcface")]
    ArcFaceMargin { scale: f64, margin: f64 },
    #[serde(rename = "adacos-fixed")]
    AdaCosFixed,
    #[serde(rename = "adacos-dynamic")]
    AdaCosDynamic,
}

impl LossSpec {
    pub fn kind(&self) -> LossKind {
        match self {
            LossSpec::PlainSoftmax => LossKind::PlainSoftmax,
            LossSpec::ScaledCosine { .. } => LossKind::ScaledCosine,
            LossSpec::CosFaceMargin { .. } => LossKind::CosFaceMargin,
            LossSpec::ArcFaceMargin { .. } => LossKind::ArcFaceMargin,
            LossSpec::AdaCosFixed => LossKind::AdaCosFixed,
            LossSpec::AdaCosDynamic => LossKind::AdaCosDynamic,
        }
    }

    /// The scale the spec carries itself, if any.
    pub fn scale(&self) -> Option<f64> {
        match *self {
            LossSpec::ScaledCosine { scale }
            | LossSpec::CosFaceMargin { scale, .. }
            | LossSpec::ArcFaceMargin { scale, .. } => Some(scale),
            _ => None,
        }
    }

    pub fn margin(&self) -> f64 {
        match *self {
            LossSpec::CosFaceMargin { margin, .. } | LossSpec::ArcFaceMargin { margin, .. } => {
                margin
            }
            _ => 0.0,
        }
    }

    /// Short identifier such as `arcface_s30_m0.5`, used for file names and table rows.
    pub fn label(&self) -> String {
        match *self {
            LossSpec::ScaledCosine { scale } => format!("scaled-cosine_s{scale}"),
            LossSpec::CosFaceMargin { scale, margin } => format!("cosface_s{scale}_m{margin}"),
            LossSpec::ArcFaceMargin { scale, margin } => format!("arcface_s{scale}_m{margin}"),
            other => other.kind().name().to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if let Some(s) = self.scale() {
            check_scale(s)?;
        }
        let (max, margin) = match *self {
            LossSpec::CosFaceMargin { margin, .. } => (1.0, margin),
            LossSpec::ArcFaceMargin { margin, .. } => (FRAC_PI_2, margin),
            _ => return Ok(()),
        };
        if !(0.0..max).contains(&margin) {
            return Err(LossError::InvalidMargin {
                kind: self.kind(),
                margin,
                max,
            });
        }
        Ok(())
    }

    /// Resolves the scale actually multiplied into the cosines.
    ///
    /// An override takes precedence over the spec's own scale; the AdaCos
    /// kinds require one. Plain softmax has no scale and yields `None`.
    pub fn effective_scale(&self, scale_override: Option<f64>) -> Result<Option<f64>, LossError> {
        self.validate()?;
        if let Some(s) = scale_override {
            check_scale(s)?;
        }
        match self {
            LossSpec::PlainSoftmax => Ok(None),
            LossSpec::AdaCosFixed | LossSpec::AdaCosDynamic => scale_override
                .map(Some)
                .ok_or(LossError::MissingScale(self.kind())),
            _ => Ok(scale_override.or(self.scale())),
        }
    }

    /// Logit for one entry given its cosine, angle and whether it is the target class.
    #[inline]
    fn logit(&self, s: f64, cos: f64, theta: f64, target: bool) -> f64 {
        match *self {
            LossSpec::CosFaceMargin { margin, .. } if target => s * (cos - margin),
            LossSpec::ArcFaceMargin { margin, .. } if target => s * (theta + margin).cos(),
            _ => s * cos,
        }
    }

    /// `∂f/∂cos θ` for one entry, before the sin θ guard is consulted.
    #[inline]
    fn logit_slope(&self, s: f64, theta: f64, target: bool, guard: SinGuard) -> Result<f64, f64> {
        match *self {
            LossSpec::ArcFaceMargin { margin, .. } if target => {
                let sin_theta = theta.sin();
                if sin_theta < ARCFACE_SIN_FLOOR {
                    match guard {
                        SinGuard::Clamp => {
                            Ok(s * (theta + margin).sin() / ARCFACE_SIN_FLOOR)
                        }
                        SinGuard::Strict => Err(sin_theta),
                    }
                } else {
                    Ok(s * (theta + margin).sin() / sin_theta)
                }
            }
            _ => Ok(s),
        }
    }
}

fn check_scale(s: f64) -> Result<(), LossError> {
    if s.is_finite() && s > 0.0 {
        Ok(())
    } else {
        Err(LossError::InvalidScale(s))
    }
}

/// How the ArcFace derivative treats `sin θ → 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SinGuard {
    /// Floor `sin θ` at [`ARCFACE_SIN_FLOOR`].
    #[default]
    Clamp,
    /// Report [`LossError::DegenerateAngle`] instead.
    Strict,
}

/// Pre-softmax values `f_{i,j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix(Matrix);

impl LogitMatrix {
    pub fn new(m: Matrix) -> Self {
        Self(m)
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }
}

/// Row-stochastic softmax output `P_{i,j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix(Matrix);

impl ProbabilityMatrix {
    pub fn values(&self) -> &Matrix {
        &self.0
    }
}

/// Builds logits for the cosine-based kinds.
pub fn logits(
    spec: &LossSpec,
    cos: &CosineMatrix,
    angles: &AngleMatrix,
    labels: &[usize],
    scale_override: Option<f64>,
) -> Result<LogitMatrix, LossError> {
    let s = spec
        .effective_scale(scale_override)?
        .ok_or(LossError::RequiresRawInputs)?;
    let (c, a) = (cos.values(), angles.values());
    if c.rows() != a.rows() || c.cols() != a.cols() {
        return Err(GeometryError::DimensionMismatch {
            what: "cosine vs angle matrix",
            expected: c.rows() * c.cols(),
            got: a.rows() * a.cols(),
        }
        .into());
    }
    check_label_rows(labels, c.rows(), c.cols())?;
    Ok(LogitMatrix(Matrix::from_fn(c.rows(), c.cols(), |i, j| {
        spec.logit(s, c[(i, j)], a[(i, j)], j == labels[i])
    })))
}

/// Plain softmax logits `⟨W_j, x_i⟩` on raw vectors.
pub fn inner_product_logits(
    batch: &EmbeddingBatch,
    weights: &ClassWeightMatrix,
) -> Result<LogitMatrix, LossError> {
    check_dims(batch, weights)?;
    let (x, w) = (batch.features(), weights.weights());
    Ok(LogitMatrix(Matrix::from_fn(x.rows(), w.rows(), |i, j| {
        dot(x.row(i), w.row(j))
    })))
}

fn check_dims(batch: &EmbeddingBatch, weights: &ClassWeightMatrix) -> Result<(), LossError> {
    if batch.dim() != weights.dim() {
        return Err(GeometryError::DimensionMismatch {
            what: "feature vs weight dimension",
            expected: weights.dim(),
            got: batch.dim(),
        }
        .into());
    }
    check_labels(batch.labels(), weights.classes())?;
    Ok(())
}

fn check_label_rows(labels: &[usize], rows: usize, classes: usize) -> Result<(), LossError> {
    if labels.len() != rows {
        return Err(GeometryError::DimensionMismatch {
            what: "labels vs rows",
            expected: rows,
            got: labels.len(),
        }
        .into());
    }
    check_labels(labels, classes)?;
    Ok(())
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `ln Σ_j e^{row_j}` with max-shift stabilization.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row_max(row);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax with the row maximum subtracted before exponentiation.
pub fn probabilities(logits: &LogitMatrix) -> ProbabilityMatrix {
    let f = &logits.0;
    let mut p = f.clone();
    for i in 0..f.rows() {
        let m = row_max(f.row(i));
        let row = p.row_mut(i);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    ProbabilityMatrix(p)
}

/// Per-sample cross-entropy `lse(f_i) − f_{i,y_i}`.
pub fn sample_losses(logits: &LogitMatrix, labels: &[usize]) -> Result<Vec<f64>, LossError> {
    let f = &logits.0;
    check_label_rows(labels, f.rows(), f.cols())?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| log_sum_exp(f.row(i)) - f[(i, y)])
        .collect())
}

/// Batch-mean cross-entropy, evaluated in log space from the logits.
pub fn cross_entropy(logits: &LogitMatrix, labels: &[usize]) -> Result<f64, LossError> {
    let losses = sample_losses(logits, labels)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// `P_{i,·} − one_hot(y_i)`: the gradient of the per-sample loss w.r.t. its logits.
pub fn logit_gradients(probs: &ProbabilityMatrix, labels: &[usize]) -> Result<Matrix, LossError> {
    let p = &probs.0;
    check_label_rows(labels, p.rows(), p.cols())?;
    let mut g = p.clone();
    for (i, &y) in labels.iter().enumerate() {
        g[(i, y)] -= 1.0;
    }
    Ok(g)
}

/// Result of a forward pass through one of the losses.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: LogitMatrix,
    /// Present for the cosine kinds; plain softmax has no cosine stage.
    pub cosines: Option<CosineMatrix>,
    pub loss: f64,
    pub scale: Option<f64>,
}

pub fn forward(
    spec: &LossSpec,
    batch: &EmbeddingBatch,
    weights: &ClassWeightMatrix,
    scale_override: Option<f64>,
) -> Result<Forward, LossError> {
    let scale = spec.effective_scale(scale_override)?;
    let (logits, cosines) = match scale {
        None => (inner_product_logits(batch, weights)?, None),
        Some(s) => {
            let cos = crate::geometry::cosine_matrix(batch, weights)?;
            let ang = crate::geometry::angles(&cos);
            (logits(spec, &cos, &ang, batch.labels(), Some(s))?, Some(cos))
        }
    };
    let loss = cross_entropy(&logits, batch.labels())?;
    Ok(Forward {
        logits,
        cosines,
        loss,
        scale,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// `∂L/∂x_i`, one row per sample, w.r.t. the raw features.
    pub d_features: Matrix,
    /// `∂L/∂W_j`, one row per class, summed over the batch.
    pub d_weights: Matrix,
    /// Batch-mean cross-entropy at the evaluation point.
    pub loss: f64,
    pub scale: Option<f64>,
}

/// Analytic gradients of the batch-mean cross-entropy.
pub fn gradients(
    spec: &LossSpec,
    batch: &EmbeddingBatch,
    weights: &ClassWeightMatrix,
    scale_override: Option<f64>,
) -> Result<Gradients, LossError> {
    gradients_with_guard(spec, batch, weights, scale_override, SinGuard::Clamp)
}

pub fn gradients_with_guard(
    spec: &LossSpec,
    batch: &EmbeddingBatch,
    weights: &ClassWeightMatrix,
    scale_override: Option<f64>,
    guard: SinGuard,
) -> Result<Gradients, LossError> {
    let scale = spec.effective_scale(scale_override)?;
    check_dims(batch, weights)?;
    match scale {
        None => Ok(plain_gradients(batch, weights)),
        Some(s) => cosine_gradients(spec, s, batch, weights, guard),
    }
}

fn plain_gradients(batch: &EmbeddingBatch, weights: &ClassWeightMatrix) -> Gradients {
    let (x, w) = (batch.features(), weights.weights());
    let labels = batch.labels();
    let n = x.rows();
    let f = LogitMatrix(Matrix::from_fn(n, w.rows(), |i, j| dot(x.row(i), w.row(j))));
    let loss = log_mean_ce(&f, labels);
    let p = probabilities(&f);

    let inv_n = 1.0 / n as f64;
    let mut d_x = Matrix::zeros(n, x.cols());
    let mut d_w = Matrix::zeros(w.rows(), w.cols());
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..w.rows() {
            let g = (p.0[(i, j)] - if j == y { 1.0 } else { 0.0 }) * inv_n;
            axpy(d_x.row_mut(i), g, w.row(j));
            axpy(d_w.row_mut(j), g, x.row(i));
        }
    }
    Gradients {
        d_features: d_x,
        d_weights: d_w,
        loss,
        scale: None,
    }
}

fn cosine_gradients(
    spec: &LossSpec,
    s: f64,
    batch: &EmbeddingBatch,
    weights: &ClassWeightMatrix,
    guard: SinGuard,
) -> Result<Gradients, LossError> {
    let labels = batch.labels();
    let (x_hat, x_norm) = normalize_rows(batch.features())?;
    let (w_hat, w_norm) = normalize_rows(weights.weights())?;
    let cos = unit_cosines(&x_hat, &w_hat);
    let n = cos.rows();
    let classes = cos.cols();
    let dim = x_hat.cols();

    let f = LogitMatrix(Matrix::from_fn(n, classes, |i, j| {
        let c = cos[(i, j)];
        spec.logit(s, c, c.acos(), j == labels[i])
    }));
    let loss = log_mean_ce(&f, labels);
    let p = probabilities(&f);

    let inv_n = 1.0 / n as f64;
    let mut d_x = Matrix::zeros(n, dim);
    // Per-class accumulators: Σ_i g_ij·x̂_i and Σ_i g_ij·cos θ_ij.
    let mut w_pull = Matrix::zeros(classes, dim);
    let mut w_coef = vec![0.0; classes];

    // Sequential over i so the weight-gradient reduction order is fixed.
    for (i, &y) in labels.iter().enumerate() {
        let mut x_coef = 0.0;
        let row_grad = d_x.row_mut(i);
        for j in 0..classes {
            let target = j == y;
            let c = cos[(i, j)];
            let slope = spec
                .logit_slope(s, c.acos(), target, guard)
                .map_err(|sin_theta| LossError::DegenerateAngle { sample: i, sin_theta })?;
            let g = (p.0[(i, j)] - if target { 1.0 } else { 0.0 }) * inv_n * slope;
            axpy(row_grad, g, w_hat.row(j));
            x_coef += g * c;
            axpy(w_pull.row_mut(j), g, x_hat.row(i));
            w_coef[j] += g * c;
        }
        let inv = 1.0 / x_norm[i];
        for (d, &xh) in row_grad.iter_mut().zip(x_hat.row(i)) {
            *d = (*d - x_coef * xh) * inv;
        }
    }

    let mut d_w = Matrix::zeros(classes, dim);
    for j in 0..classes {
        let inv = 1.0 / w_norm[j];
        let (coef, pull, wh) = (w_coef[j], w_pull.row(j), w_hat.row(j));
        for (k, d) in d_w.row_mut(j).iter_mut().enumerate() {
            *d = (pull[k] - coef * wh[k]) * inv;
        }
    }

    Ok(Gradients {
        d_features: d_x,
        d_weights: d_w,
        loss,
        scale: Some(s),
    })
}

fn log_mean_ce(f: &LogitMatrix, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| log_sum_exp(f.0.row(i)) - f.0[(i, y)])
        .sum();
    total / labels.len() as f64
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}
