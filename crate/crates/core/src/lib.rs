//! Cosine-based softmax losses with adaptive scaling.
//!
//! - [`geometry`]: normalization, cosines, angles and per-batch angle statistics.
//! - [`losses`]: logits for softmax, scaled cosine, CosFace, ArcFace and AdaCos,
//!   softmax probabilities, cross-entropy and analytic gradients.
//! - [`adaptive_scale`]: the fixed scale `√2·ln(C−1)` and the dynamic scale update.
//! - [`analysis`]: probability curves, probability range and inflection points.
//! - [`trainer`]: synthetic hypersphere tasks and a deterministic momentum-SGD trainer.
//! - [`eval`]: pair-based verification metrics (ROC, TAR@FAR, accuracy).

pub mod adaptive_scale;
pub mod analysis;
pub mod eval;
pub mod fmt;
pub mod geometry;
pub mod losses;
pub mod matrix;
pub mod trainer;

pub use matrix::Matrix;
