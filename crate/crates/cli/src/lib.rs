//! Command-line front end: each command reads one TOML config and writes
//! CSV/JSON artifacts into its output directory.
//!
//! Exit codes: 0 success, 2 validation failure, 3 diverged training run,
//! 4 missing input. Other I/O failures exit with 1.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use adacos::adaptive_scale::fixed_scale;
use adacos::analysis::{probability_curve, uniform_grid, BModel, CurveSpec};
use adacos::eval::{build_pairs, roc, RocReport};
use adacos::fmt::sig8;
use adacos::losses::LossKind;
use adacos::trainer::{
    generate_task, train, Extractor, SyntheticTask, TrainConfig, TrainError, TrainTrace,
    TrainedModel,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use config::{
    load, parse_kind, resolve_output_dir, CompareConfig, CurvesConfig, EvalConfig, EvalSplit,
    ScaleTableConfig, TrainCommandConfig,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("{0}")]
    Diverged(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::MissingInput(_) => 4,
            CliError::Io { .. } => 1,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Writes `contents` to `dir/name` through a temporary file in the same
/// directory, so readers never observe a partial file.
pub fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CliError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let target = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io(dir))?;
    tmp.write_all(contents).map_err(io(&target))?;
    tmp.as_file().sync_all().map_err(io(&target))?;
    tmp.persist(&target).map_err(|e| CliError::Io {
        path: target.clone(),
        source: e.error,
    })?;
    Ok(target)
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("artifact types serialize");
    out.push(b'\n');
    out
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CurveManifestEntry {
    pub file: String,
    pub kind: String,
    pub scale: f64,
    pub margin: f64,
    pub classes: usize,
    pub b: f64,
    pub points: usize,
}

fn curve_specs(cfg: &CurvesConfig) -> Result<Vec<CurveSpec>, CliError> {
    if cfg.curves.is_empty() {
        return Err(invalid("curves: at least one curve is required"));
    }
    let grid = match &cfg.theta_grid {
        Some(g) => g.clone(),
        None => uniform_grid(cfg.grid_points),
    };
    cfg.curves
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let kind = parse_kind(&c.kind)?;
            let scale = match (kind, c.scale) {
                (_, Some(s)) => s,
                (LossKind::AdaCosFixed, None) => {
                    fixed_scale(c.classes).map_err(|e| invalid(format!("curves[{i}]: {e}")))?
                }
                _ => return Err(invalid(format!("curves[{i}]: {} needs a scale", c.kind))),
            };
            let spec = CurveSpec {
                kind,
                scale,
                margin: c.margin,
                classes: c.classes,
                b_model: c.b.map_or(BModel::ConstantB, BModel::ExplicitB),
                theta_grid: grid.clone(),
            };
            spec.validate()
                .map_err(|e| invalid(format!("curves[{i}]: {e}")))?;
            Ok(spec)
        })
        .collect()
}

fn curve_file_name(spec: &CurveSpec) -> String {
    let mut name = format!("{}_s{}", spec.kind.name(), sig8(spec.scale));
    if spec.margin != 0.0 {
        name.push_str(&format!("_m{}", sig8(spec.margin)));
    }
    name.push_str(&format!("_C{}", spec.classes));
    if let BModel::ExplicitB(b) = spec.b_model {
        name.push_str(&format!("_B{}", sig8(b)));
    }
    name + ".csv"
}

pub fn cmd_curves(cfg: &CurvesConfig) -> Result<Vec<PathBuf>, CliError> {
    let specs = curve_specs(cfg)?;
    let dir = resolve_output_dir(&cfg.output_dir);
    let mut written = Vec::new();
    let mut manifest = Vec::new();
    for spec in &specs {
        let pts = probability_curve(spec).map_err(|e| invalid(e.to_string()))?;
        let mut csv = String::from("theta,p\n");
        for (t, p) in &pts {
            csv.push_str(&format!("{},{}\n", sig8(*t), sig8(*p)));
        }
        let file = curve_file_name(spec);
        if manifest.iter().any(|m: &CurveManifestEntry| m.file == file) {
            return Err(invalid(format!("duplicate curve {file}")));
        }
        written.push(write_atomic(&dir, &file, csv.as_bytes())?);
        manifest.push(CurveManifestEntry {
            file,
            kind: spec.kind.name().to_string(),
            scale: spec.scale,
            margin: spec.margin,
            classes: spec.classes,
            b: spec.b(),
            points: pts.len(),
        });
    }
    written.push(write_atomic(&dir, "manifest.json", &to_json(&manifest))?);
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub classes: usize,
    /// `None` for degenerate class counts (C < 3).
    pub fixed_scale: Option<f64>,
    pub status: String,
}

pub fn scale_table(classes: &[usize]) -> Result<Vec<ScaleRow>, CliError> {
    if classes.is_empty() {
        return Err(invalid("scale-table: classes must not be empty"));
    }
    Ok(classes
        .iter()
        .map(|&c| match fixed_scale(c) {
            Ok(s) => ScaleRow {
                classes: c,
                fixed_scale: Some(s),
                status: "ok".into(),
            },
            Err(_) => ScaleRow {
                classes: c,
                fixed_scale: None,
                status: "degenerate".into(),
            },
        })
        .collect())
}

pub fn cmd_scale_table(cfg: &ScaleTableConfig) -> Result<Vec<ScaleRow>, CliError> {
    let rows = scale_table(&cfg.classes)?;
    let mut csv = String::from("classes,fixed_scale,status\n");
    for r in &rows {
        let s = r.fixed_scale.map(sig8).unwrap_or_default();
        csv.push_str(&format!("{},{},{}\n", r.classes, s, r.status));
    }
    let dir = resolve_output_dir(&cfg.output_dir);
    write_atomic(&dir, "scale_table.csv", csv.as_bytes())?;
    write_atomic(&dir, "scale_table.json", &to_json(&rows))?;
    Ok(rows)
}

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub task: SyntheticTask,
    pub config: TrainConfig,
    pub iterations: usize,
    pub final_loss: f64,
    pub final_scale: Option<f64>,
    pub final_theta_med: f64,
    pub final_train_accuracy: Option<f64>,
    pub final_heldout_accuracy: Option<f64>,
}

impl TrainSummary {
    fn new(task: &SyntheticTask, config: &TrainConfig, trace: &TrainTrace) -> Self {
        let last = trace.records.last().expect("at least one iteration");
        Self {
            task: task.clone(),
            config: config.clone(),
            iterations: trace.records.len(),
            final_loss: last.loss,
            final_scale: last.s_used,
            final_theta_med: last.theta_med,
            final_train_accuracy: trace.final_train_accuracy(),
            final_heldout_accuracy: trace.final_heldout_accuracy(),
        }
    }
}

pub fn cmd_train(cfg: &TrainCommandConfig) -> Result<TrainSummary, CliError> {
    let config = cfg.train.with_loss(cfg.loss);
    config.validate()?;
    let dataset = generate_task(&cfg.task)?;
    let trace = train(&dataset, &config)?;
    let summary = TrainSummary::new(&cfg.task, &config, &trace);
    let dir = resolve_output_dir(&cfg.output_dir);
    write_atomic(&dir, TRACE_FILE, trace.to_csv().as_bytes())?;
    write_atomic(&dir, MODEL_FILE, &to_json(&trace.model))?;
    write_atomic(&dir, SUMMARY_FILE, &to_json(&summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareEntry {
    pub loss: String,
    /// Iterations to threshold per seed offset; `None` means never reached.
    pub per_seed: Vec<Option<usize>>,
    /// Median over seeds, counting "never" as worse than any iteration count.
    pub median: Option<usize>,
}

/// Median with `None` ordered after every `Some`; even counts take the lower middle.
pub fn median_iterations(values: &[Option<usize>]) -> Option<usize> {
    let mut v: Vec<_> = values.iter().map(|x| x.unwrap_or(usize::MAX)).collect();
    v.sort_unstable();
    let m = *v.get((v.len().max(1) - 1) / 2)?;
    (m != usize::MAX).then_some(m)
}

fn seeded_run(cfg: &CompareConfig, offset: u64) -> (SyntheticTask, config::TrainSettings) {
    let mut task = cfg.task.clone();
    task.seed = task.seed.wrapping_add(offset);
    let mut settings = cfg.train.clone();
    settings.init_seed = settings.init_seed.wrapping_add(offset);
    settings.shuffle_seed = settings.shuffle_seed.wrapping_add(offset);
    (task, settings)
}

pub fn cmd_compare(cfg: &CompareConfig) -> Result<Vec<CompareEntry>, CliError> {
    if cfg.losses.is_empty() {
        return Err(invalid("compare: losses must not be empty"));
    }
    if cfg.seeds.is_empty() {
        return Err(invalid("compare: seeds must not be empty"));
    }
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(invalid(format!("compare: threshold {} outside [0, 1]", cfg.threshold)));
    }
    for loss in &cfg.losses {
        cfg.train.with_loss(*loss).validate()?;
    }

    let mut per_loss: Vec<Vec<Option<usize>>> = vec![Vec::new(); cfg.losses.len()];
    for &offset in &cfg.seeds {
        let (task, settings) = seeded_run(cfg, offset);
        let dataset = generate_task(&task)?;
        let configs: Vec<TrainConfig> = cfg.losses.iter().map(|l| settings.with_loss(*l)).collect();
        let rows = adacos::trainer::compare(&dataset, &configs, cfg.threshold)?;
        for (acc, row) in per_loss.iter_mut().zip(rows) {
            acc.push(row.iterations_to_threshold);
        }
    }
    let entries: Vec<CompareEntry> = cfg
        .losses
        .iter()
        .zip(per_loss)
        .map(|(loss, per_seed)| CompareEntry {
            loss: loss.label(),
            median: median_iterations(&per_seed),
            per_seed,
        })
        .collect();

    let show = |v: Option<usize>| v.map_or_else(|| "never".to_string(), |n| n.to_string());
    let mut csv = String::from("loss");
    for s in &cfg.seeds {
        csv.push_str(&format!(",seed_{s}"));
    }
    csv.push_str(",median\n");
    for e in &entries {
        csv.push_str(&e.loss);
        for v in &e.per_seed {
            csv.push(',');
            csv.push_str(&show(*v));
        }
        csv.push(',');
        csv.push_str(&show(e.median));
        csv.push('\n');
    }
    let dir = resolve_output_dir(&cfg.output_dir);
    write_atomic(&dir, "compare.csv", csv.as_bytes())?;
    write_atomic(&dir, "compare.json", &to_json(&entries))?;
    Ok(entries)
}

fn read_artifact<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::MissingInput(format!("{} is not a valid artifact: {e}", path.display())))
}

pub fn cmd_eval(cfg: &EvalConfig) -> Result<RocReport, CliError> {
    let summary: TrainSummary = read_artifact(&cfg.train_dir.join(SUMMARY_FILE))?;
    let model: TrainedModel = read_artifact(&cfg.train_dir.join(MODEL_FILE))?;
    let dataset = generate_task(&summary.task)?;
    if let Extractor::FreeEmbedding { features } = &model.extractor {
        if features.rows() != dataset.train.len() {
            return Err(CliError::MissingInput(
                "model does not belong to the task recorded in the summary".into(),
            ));
        }
    }
    let split = match cfg.split {
        EvalSplit::Heldout => &dataset.heldout,
        EvalSplit::Unseen => &dataset.unseen,
    };
    let embeddings = model.embed(&dataset, &split.points);
    let pairs = build_pairs(
        &embeddings,
        &split.labels,
        cfg.positive_pairs,
        cfg.negative_pairs,
        cfg.seed,
    )
    .map_err(|e| invalid(e.to_string()))?;
    let report = roc(&pairs, &cfg.far_levels).map_err(|e| invalid(e.to_string()))?;

    let dir = resolve_output_dir(&cfg.output_dir);
    write_atomic(&dir, "roc.json", &to_json(&report))?;
    if cfg.write_points {
        write_atomic(&dir, "roc_points.csv", report.points_csv().as_bytes())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Curves,
    ScaleTable,
    Train,
    Compare,
    Eval,
}

/// Loads the config for `command` and runs it, returning a short report for stdout.
pub fn run(command: Command, config_path: &Path) -> Result<String, CliError> {
    match command {
        Command::Curves => {
            let files = cmd_curves(&load(config_path)?)?;
            Ok(format!("wrote {} files", files.len()))
        }
        Command::ScaleTable => {
            let rows = cmd_scale_table(&load(config_path)?)?;
            let mut out = String::from("classes  fixed_scale\n");
            for r in rows {
                let s = r.fixed_scale.map_or_else(|| "degenerate".to_string(), sig8);
                out.push_str(&format!("{:>7}  {s}\n", r.classes));
            }
            Ok(out)
        }
        Command::Train => {
            let s = cmd_train(&load(config_path)?)?;
            Ok(format!(
                "{} iterations, final loss {}, held-out accuracy {}",
                s.iterations,
                sig8(s.final_loss),
                s.final_heldout_accuracy.map_or_else(|| "n/a".into(), sig8)
            ))
        }
        Command::Compare => {
            let entries = cmd_compare(&load(config_path)?)?;
            let mut out = String::new();
            for e in entries {
                let m = e.median.map_or_else(|| "never".to_string(), |n| n.to_string());
                out.push_str(&format!("{:<28} {m}\n", e.loss));
            }
            Ok(out)
        }
        Command::Eval => {
            let r = cmd_eval(&load(config_path)?)?;
            let mut out = format!("verification accuracy {}\n", sig8(r.verification_accuracy));
            for t in r.tar_at_far {
                let note = if t.supported { "" } else { " (unsupported level)" };
                out.push_str(&format!("TAR@FAR={} {}{note}\n", sig8(t.far_level), sig8(t.tar)));
            }
            Ok(out)
        }
    }
}
