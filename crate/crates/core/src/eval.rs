//! Open-set verification: cosine-scored pairs, ROC sweep, verification
//! accuracy and TAR at fixed FAR.
//!
//! Thresholds are the distinct pair scores. A pair is accepted when its score
//! is `>=` the threshold. A reject-all point (no threshold) is always
//! included so the sweep covers both extremes.
//!
//! TAR@FAR uses a conservative step convention: the lowest threshold whose
//! FAR does not exceed the level, with no interpolation between points.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, EPS_NORM};
use crate::matrix::{dot, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid FAR level {0}; levels must lie in (0, 1)")]
    InvalidFarLevel(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pairs: Vec<Pair>,
    positives: usize,
    negatives: usize,
}

impl PairSet {
    /// Requires at least one positive and one negative pair.
    pub fn new(pairs: Vec<Pair>) -> Result<Self, EvalError> {
        let positives = pairs.iter().filter(|p| p.same).count();
        let negatives = pairs.len() - positives;
        if positives == 0 || negatives == 0 {
            return Err(EvalError::InsufficientData(format!(
                "need positive and negative pairs, got {positives} and {negatives}"
            )));
        }
        Ok(Self {
            pairs,
            positives,
            negatives,
        })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn negatives(&self) -> usize {
        self.negatives
    }

    /// Cosine similarity of every pair, in pair order.
    pub fn scores(&self) -> Result<Vec<f64>, EvalError> {
        self.pairs
            .iter()
            .map(|p| {
                let na = dot(&p.a, &p.a).sqrt();
                let nb = dot(&p.b, &p.b).sqrt();
                if na <= EPS_NORM || nb <= EPS_NORM {
                    return Err(GeometryError::ZeroVector { norm: na.min(nb) }.into());
                }
                Ok((dot(&p.a, &p.b) / (na * nb)).clamp(-1.0, 1.0))
            })
            .collect()
    }
}

/// Samples `n_pos` same-label and `n_neg` different-label pairs uniformly
/// without replacement.
pub fn build_pairs(
    embeddings: &Matrix,
    labels: &[usize],
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<PairSet, EvalError> {
    if labels.len() != embeddings.rows() {
        return Err(GeometryError::DimensionMismatch {
            what: "labels vs embedding rows",
            expected: embeddings.rows(),
            got: labels.len(),
        }
        .into());
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::InsufficientData(
            "n_pos and n_neg must both be >= 1".into(),
        ));
    }
    let n = labels.len();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                pos.push((i, j));
            } else {
                neg.push((i, j));
            }
        }
    }
    if pos.len() < n_pos {
        return Err(EvalError::InsufficientData(format!(
            "requested {n_pos} positive pairs, only {} available",
            pos.len()
        )));
    }
    if neg.len() < n_neg {
        return Err(EvalError::InsufficientData(format!(
            "requested {n_neg} negative pairs, only {} available",
            neg.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = |pool: &[(usize, usize)], k: usize, same: bool| -> Vec<Pair> {
        let mut idx = sample(&mut rng, pool.len(), k).into_vec();
        idx.sort_unstable();
        idx.into_iter()
            .map(|t| {
                let (i, j) = pool[t];
                Pair {
                    a: embeddings.row(i).to_vec(),
                    b: embeddings.row(j).to_vec(),
                    same,
                }
            })
            .collect()
    };
    let mut pairs = chosen(&pos, n_pos, true);
    pairs.extend(chosen(&neg, n_neg, false));
    PairSet::new(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Accept when score >= threshold; `None` rejects everything.
    pub threshold: Option<f64>,
    pub tar: f64,
    pub far: f64,
    pub true_accepts: usize,
    pub false_accepts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far_level: f64,
    pub tar: f64,
    pub threshold: Option<f64>,
    /// FAR actually achieved at the chosen threshold.
    pub achieved_far: f64,
    /// False when the level is below `1/negatives` and cannot be resolved.
    pub supported: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub positives: usize,
    pub negatives: usize,
    /// Ordered by decreasing threshold.
    pub points: Vec<RocPoint>,
    pub tar_at_far: Vec<TarAtFar>,
    pub verification_accuracy: f64,
    pub best_threshold: Option<f64>,
}

impl RocReport {
    /// ROC points as CSV; the reject-all point has an empty threshold.
    pub fn points_csv(&self) -> String {
        use crate::fmt::sig8;
        let mut out = String::from("threshold,tar,far\n");
        for p in &self.points {
            let thr = p.threshold.map(sig8).unwrap_or_default();
            out.push_str(&format!("{thr},{},{}\n", sig8(p.tar), sig8(p.far)));
        }
        out
    }
}

pub fn roc(pairs: &PairSet, far_levels: &[f64]) -> Result<RocReport, EvalError> {
    for &l in far_levels {
        if !(l > 0.0 && l < 1.0) {
            return Err(EvalError::InvalidFarLevel(l));
        }
    }
    let scores = pairs.scores()?;
    let (p, n) = (pairs.positives(), pairs.negatives());

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: None,
        tar: 0.0,
        far: 0.0,
        true_accepts: 0,
        false_accepts: 0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let thr = scores[order[k]];
        while k < order.len() && scores[order[k]] == thr {
            if pairs.pairs()[order[k]].same {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint {
            threshold: Some(thr),
            tar: tp as f64 / p as f64,
            far: fp as f64 / n as f64,
            true_accepts: tp,
            false_accepts: fp,
        });
    }

    let mut best = &points[0];
    let mut best_correct = 0usize;
    for pt in &points {
        let correct = pt.true_accepts + (n - pt.false_accepts);
        if correct > best_correct {
            best_correct = correct;
            best = pt;
        }
    }
    let verification_accuracy = best_correct as f64 / (p + n) as f64;
    let best_threshold = best.threshold;

    let tar_at_far = far_levels
        .iter()
        .map(|&level| {
            // Points are in decreasing threshold order, so FAR is nondecreasing;
            // take the last point still within the level.
            let pt = points
                .iter()
                .take_while(|pt| pt.far <= level)
                .last()
                .expect("reject-all point has FAR 0");
            TarAtFar {
                far_level: level,
                tar: pt.tar,
                threshold: pt.threshold,
                achieved_far: pt.far,
                supported: level * n as f64 >= 1.0,
            }
        })
        .collect();

    Ok(RocReport {
        positives: p,
        negatives: n,
        points,
        tar_at_far,
        verification_accuracy,
        best_threshold,
    })
}
