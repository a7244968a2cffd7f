//! TOML experiment configs, one schema per command. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use adacos::losses::{LossKind, LossSpec};
use adacos::trainer::{FeatureMode, SyntheticTask, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that replaces `output_dir` in every config.
pub const OUTPUT_DIR_ENV: &str = "ADACOS_OUTPUT_DIR";

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::MissingInput(format!("cannot read config {}: {e}", path.display()))
    })?;
    toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {}", path.display(), e.message())))
}

/// `output_dir` from the config unless the environment overrides it.
pub fn resolve_output_dir(configured: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => configured.to_path_buf(),
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CurvesConfig {
    pub output_dir: PathBuf,
    /// Uniform grid size on [0, π/2]; ignored when `theta_grid` is given.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub theta_grid: Option<Vec<f64>>,
    pub curves: Vec<CurveEntry>,
}

fn default_grid_points() -> usize {
    adacos::analysis::DEFAULT_GRID_POINTS
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CurveEntry {
    /// Loss kind name, e.g. `scaled-cosine`, `arcface`, `adacos-fixed`.
    pub kind: String,
    /// Required except for `adacos-fixed`, which uses `√2·ln(C−1)`.
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub margin: f64,
    pub classes: usize,
    /// Explicit non-target mass; defaults to `C − 1`.
    #[serde(default)]
    pub b: Option<f64>,
}

pub fn parse_kind(name: &str) -> Result<LossKind, CliError> {
    LossKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| {
            let names: Vec<_> = LossKind::ALL.iter().map(|k| k.name()).collect();
            CliError::Validation(format!("unknown loss kind {name:?}; expected one of {names:?}"))
        })
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleTableConfig {
    pub output_dir: PathBuf,
    pub classes: Vec<usize>,
}

/// Training settings shared by `train` and `compare`; `compare` supplies the
/// loss per row.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    #[serde(default = "default_mode")]
    pub mode: FeatureMode,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_mode() -> FeatureMode {
    FeatureMode::FreeEmbedding
}

fn default_eval_every() -> usize {
    50
}

impl TrainSettings {
    pub fn with_loss(&self, loss: LossSpec) -> TrainConfig {
        TrainConfig {
            loss,
            batch_size: self.batch_size,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            mode: self.mode.clone(),
            init_seed: self.init_seed,
            shuffle_seed: self.shuffle_seed,
            eval_every: self.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub output_dir: PathBuf,
    pub task: SyntheticTask,
    pub loss: LossSpec,
    pub train: TrainSettings,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub output_dir: PathBuf,
    /// Held-out accuracy each loss must reach.
    pub threshold: f64,
    /// Seed offsets. Run `k` uses task seed `task.seed + k` and adds `k` to
    /// the init and shuffle seeds. Defaults to a single run at offset 0.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub task: SyntheticTask,
    pub train: TrainSettings,
    pub losses: Vec<LossSpec>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    Heldout,
    Unseen,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub output_dir: PathBuf,
    /// Output directory of a completed `train` run.
    pub train_dir: PathBuf,
    #[serde(default = "default_split")]
    pub split: EvalSplit,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    pub seed: u64,
    #[serde(default = "default_far_levels")]
    pub far_levels: Vec<f64>,
    /// Also write the ROC points as CSV.
    #[serde(default = "default_true")]
    pub write_points: bool,
}

fn default_split() -> EvalSplit {
    EvalSplit::Unseen
}

fn default_far_levels() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3]
}

fn default_true() -> bool {
    true
}
