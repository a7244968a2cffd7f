//! Closed-form analysis of the target-class probability
//!
//! ```text
//! P(θ) = e^{f(θ)} / (e^{f(θ)} + B)  =  σ(f(θ) − ln B)
//! ```
//!
//! under a constant non-target mass `B` (by default `C−1`, all non-target
//! classes orthogonal), together with the achievable probability range and
//! the inflection point of `P(θ)` for unmargined cosine logits.
//!
//! For `f = s·cos θ`, `P'' = P(1−P)·s·[(1−2P)·s·sin²θ − cos θ]`, so the
//! inflection solves `(1−2P)·s·sin²θ = cos θ`. It is located by bisection on
//! `(0, π/2)`, where the left side of the difference is `−1` at `θ = 0` and
//! `s·(B−1)/(B+1) > 0` at `θ = π/2`.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

use crate::losses::{LossKind, LossSpec};

/// Number of points in the default θ grid.
pub const DEFAULT_GRID_POINTS: usize = 512;

/// Bisection stops once the bracket is narrower than this (radians).
pub const INFLECTION_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("invalid curve spec: {0}")]
    InvalidSpec(String),
    #[error("no inflection root in (0, π/2): ln B = {ln_b} must lie in (0, s = {scale})")]
    NoRootInDomain { scale: f64, ln_b: f64 },
    #[error("bisection bracket [{lo}, {hi}] does not change sign")]
    NoSignChange { lo: f64, hi: f64 },
}

/// Model for the non-target logit mass `B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BModel {
    /// `B = C − 1`: every non-target class at θ = π/2.
    ConstantB,
    ExplicitB(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub kind: LossKind,
    pub scale: f64,
    pub margin: f64,
    pub classes: usize,
    pub b_model: BModel,
    pub theta_grid: Vec<f64>,
}

impl CurveSpec {
    /// Unmargined `s·cos θ` curve on the default grid with `B = C−1`.
    pub fn scaled(scale: f64, classes: usize) -> Self {
        Self {
            kind: LossKind::ScaledCosine,
            scale,
            margin: 0.0,
            classes,
            b_model: BModel::ConstantB,
            theta_grid: uniform_grid(DEFAULT_GRID_POINTS),
        }
    }

    pub fn b(&self) -> f64 {
        match self.b_model {
            BModel::ConstantB => self.classes.saturating_sub(1) as f64,
            BModel::ExplicitB(b) => b,
        }
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let invalid = |m: String| Err(AnalysisError::InvalidSpec(m));
        let loss = match self.kind {
            LossKind::PlainSoftmax => {
                return invalid("plain softmax has no cosine probability curve".into())
            }
            LossKind::CosFaceMargin => LossSpec::CosFaceMargin {
                scale: self.scale,
                margin: self.margin,
            },
            LossKind::ArcFaceMargin => LossSpec::ArcFaceMargin {
                scale: self.scale,
                margin: self.margin,
            },
            _ if self.margin != 0.0 => {
                return invalid(format!("{} takes no margin", self.kind));
            }
            _ => LossSpec::ScaledCosine { scale: self.scale },
        };
        loss.validate()
            .map_err(|e| AnalysisError::InvalidSpec(e.to_string()))?;
        if self.classes < 2 {
            return invalid(format!("need at least 2 classes, got {}", self.classes));
        }
        let b = self.b();
        if !(b.is_finite() && b > 0.0) {
            return invalid(format!("B must be positive and finite, got {b}"));
        }
        if self.theta_grid.len() < 2 {
            return invalid("θ grid needs at least 2 points".into());
        }
        if self
            .theta_grid
            .iter()
            .any(|t| !(0.0..=FRAC_PI_2).contains(t))
        {
            return invalid("θ grid must lie within [0, π/2]".into());
        }
        if self.theta_grid.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("θ grid must be strictly increasing".into());
        }
        Ok(())
    }

    /// Target logit at angle `theta`.
    pub fn target_logit(&self, theta: f64) -> f64 {
        match self.kind {
            LossKind::CosFaceMargin => self.scale * (theta.cos() - self.margin),
            LossKind::ArcFaceMargin => self.scale * (theta + self.margin).cos(),
            _ => self.scale * theta.cos(),
        }
    }

    pub fn probability_at(&self, theta: f64) -> f64 {
        logistic(self.target_logit(theta) - self.b().ln())
    }
}

/// `n` evenly spaced angles from 0 to π/2 inclusive.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|k| if k + 1 == n { FRAC_PI_2 } else { FRAC_PI_2 * k as f64 / (n - 1) as f64 })
            .collect(),
    }
}

/// `1 / (1 + e^{−z})` without overflow for large `|z|`.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `(θ, P(θ))` at each grid point.
pub fn probability_curve(spec: &CurveSpec) -> Result<Vec<(f64, f64)>, AnalysisError> {
    spec.validate()?;
    Ok(spec
        .theta_grid
        .iter()
        .map(|&t| (t, spec.probability_at(t)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityRange {
    pub lower: f64,
    pub upper: f64,
}

/// Smallest and largest probability any class can receive with scaled-cosine logits.
pub fn range_bounds(scale: f64, classes: usize) -> Result<ProbabilityRange, AnalysisError> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(AnalysisError::InvalidSpec(format!("scale must be >= 0, got {scale}")));
    }
    if classes < 2 {
        return Err(AnalysisError::InvalidSpec(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let others = (classes - 1) as f64;
    Ok(ProbabilityRange {
        lower: 1.0 / (1.0 + others * scale.exp()),
        upper: 1.0 / (1.0 + others * (-scale).exp()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InflectionResult {
    /// Root of `P''(θ) = 0` in `(0, π/2)`.
    pub theta_exact: f64,
    /// `acos(ln B / s)`.
    pub theta_approx: f64,
    /// `ln B / cos θ_exact`: the scale the approximation assigns to the exact root.
    pub s_from_approx: f64,
    /// `|cos θ_exact − ln B / s| / (ln B / s)`.
    pub relative_error: f64,
    pub p_at_exact: f64,
}

/// `P(θ) = σ(s·cos θ − ln B)`.
pub fn unmargined_probability(scale: f64, b: f64, theta: f64) -> f64 {
    logistic(scale * theta.cos() - b.ln())
}

/// `(1 − 2P)·s·sin²θ − cos θ`; zero exactly where `P''` vanishes.
pub fn inflection_condition(scale: f64, b: f64, theta: f64) -> f64 {
    let p = unmargined_probability(scale, b, theta);
    let sin = theta.sin();
    (1.0 - 2.0 * p) * scale * sin * sin - theta.cos()
}

/// Analytic `d²P/dθ²` for `P(θ) = σ(s·cos θ − ln B)`.
pub fn probability_second_derivative(scale: f64, b: f64, theta: f64) -> f64 {
    let p = unmargined_probability(scale, b, theta);
    p * (1.0 - p) * scale * inflection_condition(scale, b, theta)
}

/// Bisection on `[lo, hi]`; `f(lo)` and `f(hi)` must differ in sign.
pub fn bisect(
    f: impl Fn(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
) -> Result<f64, AnalysisError> {
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() || f_lo.is_nan() || f_hi.is_nan() {
        return Err(AnalysisError::NoSignChange { lo, hi });
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn find_inflection(scale: f64, b: f64) -> Result<InflectionResult, AnalysisError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(AnalysisError::InvalidSpec(format!("scale must be > 0, got {scale}")));
    }
    if !(b.is_finite() && b > 0.0) {
        return Err(AnalysisError::InvalidSpec(format!("B must be > 0, got {b}")));
    }
    let ln_b = b.ln();
    if !(ln_b > 0.0 && ln_b < scale) {
        return Err(AnalysisError::NoRootInDomain { scale, ln_b });
    }
    let theta_exact = bisect(|t| inflection_condition(scale, b, t), 0.0, FRAC_PI_2, INFLECTION_TOL)?;
    let ratio = ln_b / scale;
    Ok(InflectionResult {
        theta_exact,
        theta_approx: ratio.acos(),
        s_from_approx: ln_b / theta_exact.cos(),
        relative_error: (theta_exact.cos() - ratio).abs() / ratio,
        p_at_exact: unmargined_probability(scale, b, theta_exact),
    })
}
