//! Adaptive scale for cosine softmax: the fixed scale `√2·ln(C−1)` and the
//! per-iteration dynamic update
//!
//! ```text
//! s⁽⁰⁾ = √2·ln(C−1)
//! s⁽ᵗ⁾ = ln B_avg⁽ᵗ⁾ / cos(min(π/4, θ_med⁽ᵗ⁾))        t ≥ 1
//! B_avg⁽ᵗ⁾ = mean_i Σ_{k≠y_i} exp(s⁽ᵗ⁻¹⁾·cos θ_ik)
//! ```
//!
//! `B_avg` is evaluated with the previous iteration's scale; the current
//! scale never feeds back into its own `B` term.

use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_4, SQRT_2};
use thiserror::Error;

use crate::geometry::{angle_stats, check_labels, AngleMatrix, CosineMatrix, GeometryError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScaleError {
    #[error("need at least 3 classes for a positive fixed scale, got {0}")]
    TooFewClasses(usize),
    #[error("non-finite scale update (B_avg = {b_avg}, θ_med = {theta_med})")]
    NonfiniteScale { b_avg: f64, theta_med: f64 },
    #[error("non-positive scale {scale} (B_avg = {b_avg} <= 1)")]
    NonPositiveScale { scale: f64, b_avg: f64 },
    #[error("invalid previous scale {0}")]
    InvalidScale(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// `√2·ln(C−1)`: the scale that puts the probability inflection at θ = π/4
/// when the non-target logits sum to `C−1`.
pub fn fixed_scale(classes: usize) -> Result<f64, ScaleError> {
    if classes < 3 {
        return Err(ScaleError::TooFewClasses(classes));
    }
    Ok(SQRT_2 * ((classes - 1) as f64).ln())
}

/// Per-sample non-target logit mass and its batch mean.
#[derive(Debug, Clone, PartialEq)]
pub struct BTerms {
    pub b_i: Vec<f64>,
    pub b_avg: f64,
}

/// `B_i = Σ_{k≠y_i} exp(s·cos θ_ik)` for each row, with max-shifted summation.
pub fn batch_b_terms(cos: &CosineMatrix, labels: &[usize], s_prev: f64) -> Result<BTerms, ScaleError> {
    if !(s_prev.is_finite() && s_prev > 0.0) {
        return Err(ScaleError::InvalidScale(s_prev));
    }
    let c = cos.values();
    if labels.len() != c.rows() || c.rows() == 0 {
        return Err(GeometryError::DimensionMismatch {
            what: "labels vs cosine rows",
            expected: c.rows(),
            got: labels.len(),
        }
        .into());
    }
    check_labels(labels, c.cols())?;

    let b_i: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let others = c.row(i).iter().enumerate().filter(|&(k, _)| k != y);
            let m = others
                .clone()
                .map(|(_, &v)| s_prev * v)
                .fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return 0.0;
            }
            m.exp() * others.map(|(_, &v)| (s_prev * v - m).exp()).sum::<f64>()
        })
        .collect();
    let b_avg = b_i.iter().sum::<f64>() / b_i.len() as f64;
    Ok(BTerms { b_i, b_avg })
}

/// One entry of the scale history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub t: u64,
    pub s: f64,
    pub b_avg: f64,
    pub theta_med: f64,
}

/// Dynamic-scale state owned by a single training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleState {
    classes: usize,
    t: u64,
    s_current: f64,
    b_avg_last: f64,
    theta_med_last: f64,
    history: Vec<ScaleRecord>,
}

impl ScaleState {
    /// State at t = 0: `s = √2·ln(C−1)`, with `B_avg = C−1` and `θ_med = π/4`
    /// as the values that reproduce it.
    pub fn new(classes: usize) -> Result<Self, ScaleError> {
        let s = fixed_scale(classes)?;
        let b = (classes - 1) as f64;
        let rec = ScaleRecord {
            t: 0,
            s,
            b_avg: b,
            theta_med: FRAC_PI_4,
        };
        Ok(Self {
            classes,
            t: 0,
            s_current: s,
            b_avg_last: b,
            theta_med_last: FRAC_PI_4,
            history: vec![rec],
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn scale(&self) -> f64 {
        self.s_current
    }

    pub fn b_avg_last(&self) -> f64 {
        self.b_avg_last
    }

    pub fn theta_med_last(&self) -> f64 {
        self.theta_med_last
    }

    pub fn history(&self) -> &[ScaleRecord] {
        &self.history
    }

    /// Advances to iteration `t + 1` using the current batch.
    ///
    /// On error the state is left untouched.
    pub fn update(
        &mut self,
        cos: &CosineMatrix,
        angles: &AngleMatrix,
        labels: &[usize],
    ) -> Result<ScaleRecord, ScaleError> {
        if cos.classes() != self.classes {
            return Err(GeometryError::DimensionMismatch {
                what: "cosine columns vs class count",
                expected: self.classes,
                got: cos.classes(),
            }
            .into());
        }
        let b_avg = batch_b_terms(cos, labels, self.s_current)?.b_avg;
        let theta_med = angle_stats(angles, labels)?.median_corr;
        let s = dynamic_scale(b_avg, theta_med)?;

        let rec = ScaleRecord {
            t: self.t + 1,
            s,
            b_avg,
            theta_med,
        };
        self.t = rec.t;
        self.s_current = s;
        self.b_avg_last = b_avg;
        self.theta_med_last = theta_med;
        self.history.push(rec);
        Ok(rec)
    }

    /// History as CSV with columns `t,s,b_avg,theta_med`.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("t,s,b_avg,theta_med\n");
        for r in &self.history {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.t,
                crate::fmt::sig8(r.s),
                crate::fmt::sig8(r.b_avg),
                crate::fmt::sig8(r.theta_med)
            ));
        }
        out
    }
}

/// `ln B_avg / cos(min(π/4, θ_med))`.
pub fn dynamic_scale(b_avg: f64, theta_med: f64) -> Result<f64, ScaleError> {
    if !b_avg.is_finite() || !theta_med.is_finite() {
        return Err(ScaleError::NonfiniteScale { b_avg, theta_med });
    }
    let s = b_avg.ln() / theta_med.min(FRAC_PI_4).cos();
    if !s.is_finite() {
        return Err(ScaleError::NonfiniteScale { b_avg, theta_med });
    }
    if s <= 0.0 {
        return Err(ScaleError::NonPositiveScale { scale: s, b_avg });
    }
    Ok(s)
}
