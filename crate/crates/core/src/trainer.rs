//! Deterministic toy-scale training on synthetic hypersphere data.
//!
//! Classes are unit directions drawn uniformly on the sphere. Each sample is
//! its class direction plus isotropic Gaussian noise, renormalized. The
//! features fed to the loss are either the samples themselves as free
//! parameters ([`FeatureMode::FreeEmbedding`]) or the output of a small ReLU
//! MLP applied to a fixed random linear lift of the sample ([`FeatureMode::Mlp`]).
//!
//! Optimization is plain mini-batch SGD with heavy-ball momentum
//! (`v ← μ·v + g`, `p ← p − η·v`). Every random draw comes from seeded
//! ChaCha8 streams and every reduction runs in a fixed order, so identical
//! configurations give bitwise-identical traces.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive_scale::{fixed_scale, ScaleError, ScaleState};
use crate::geometry::{
    angle_stats, angles, cosine_matrix, normalize_rows, ClassWeightMatrix, EmbeddingBatch,
    GeometryError,
};
use crate::losses::{gradients, LossError, LossKind, LossSpec};
use crate::matrix::{dot, Matrix};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid task: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {t}: {reason}")]
    Diverged { t: usize, reason: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Synthetic classification task on the unit hypersphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Cluster tightness κ: the perturbation has RMS norm `1/√κ`.
    pub concentration: f64,
    /// Raw input width for MLP mode.
    pub input_dim: usize,
    pub seed: u64,
}

impl SyntheticTask {
    /// The reference task: 100 classes in 64 dimensions at κ = 20, 50 samples
    /// per class. Seeds 0, 1 and 2 are the calibrated reference seeds.
    pub fn reference(seed: u64) -> Self {
        Self {
            classes: 100,
            dim: 64,
            samples_per_class: 50,
            concentration: 20.0,
            input_dim: 128,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidSpec(m));
        if self.classes < 3 {
            return bad(format!("need at least 3 classes, got {}", self.classes));
        }
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.samples_per_class < 2 {
            return bad(format!(
                "samples_per_class must be >= 2 for a train/held-out split, got {}",
                self.samples_per_class
            ));
        }
        if !(self.concentration.is_finite() && self.concentration > 0.0) {
            return bad(format!("concentration must be > 0, got {}", self.concentration));
        }
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1".into());
        }
        Ok(())
    }

    /// Number of held-back classes used only for open-set evaluation: ⌈C/5⌉.
    pub fn unseen_classes(&self) -> usize {
        self.classes.div_ceil(5)
    }

    /// Training samples per class under the 80/20 split.
    pub fn train_per_class(&self) -> usize {
        let n = (0.8 * self.samples_per_class as f64).round() as usize;
        n.clamp(1, self.samples_per_class - 1)
    }
}

/// Unit-norm points with their labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub points: Matrix,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: SyntheticTask,
    /// One unit row per class: the `C` training classes, then the unseen ones.
    pub class_directions: Matrix,
    pub train: Split,
    pub heldout: Split,
    /// Samples of the unseen classes, labelled `C..C+⌈C/5⌉`.
    pub unseen: Split,
    /// Fixed `input_dim × dim` map from embedding space to MLP inputs.
    pub lift: Matrix,
}

impl Dataset {
    /// MLP inputs for the given points: `lift · x` per row.
    pub fn lifted(&self, points: &Matrix) -> Matrix {
        Matrix::from_fn(points.rows(), self.lift.rows(), |i, k| {
            dot(self.lift.row(k), points.row(i))
        })
    }
}

fn gaussian_row(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_row(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_row(rng, dim);
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn generate_task(task: &SyntheticTask) -> Result<Dataset, TrainError> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let (c, d) = (task.classes, task.dim);
    let total_classes = c + task.unseen_classes();

    let directions: Vec<Vec<f64>> = (0..total_classes).map(|_| unit_row(&mut rng, d)).collect();
    // Per-coordinate σ = 1/√(κ·d) gives the perturbation an RMS norm of 1/√κ.
    let sigma = 1.0 / (task.concentration * d as f64).sqrt();
    let n_train = task.train_per_class();

    let mut train = (Vec::new(), Vec::new());
    let mut heldout = (Vec::new(), Vec::new());
    let mut unseen = (Vec::new(), Vec::new());
    for (class, mu) in directions.iter().enumerate() {
        for k in 0..task.samples_per_class {
            let noise = gaussian_row(&mut rng, d);
            let x: Vec<f64> = mu.iter().zip(&noise).map(|(m, z)| m + sigma * z).collect();
            let n = dot(&x, &x).sqrt();
            let x: Vec<f64> = x.into_iter().map(|v| v / n).collect();
            let dst = if class >= c {
                &mut unseen
            } else if k < n_train {
                &mut train
            } else {
                &mut heldout
            };
            dst.0.push(x);
            dst.1.push(class);
        }
    }

    let lift_scale = 1.0 / (d as f64).sqrt();
    let lift = Matrix::from_fn(task.input_dim, d, |_, _| {
        lift_scale * rng.sample::<f64, _>(StandardNormal)
    });

    let split = |(rows, labels): (Vec<Vec<f64>>, Vec<usize>)| Split {
        points: Matrix::from_rows(&rows).expect("rows share the embedding dimension"),
        labels,
    };
    Ok(Dataset {
        task: task.clone(),
        class_directions: Matrix::from_rows(&directions).expect("uniform rows"),
        train: split(train),
        heldout: split(heldout),
        unseen: split(unseen),
        lift,
    })
}

/// How the features fed to the loss are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeatureMode {
    /// Each training sample's feature vector is itself a parameter.
    FreeEmbedding,
    /// ReLU MLP from the lifted input to the embedding dimension.
    Mlp { hidden: Vec<usize> },
}

fn default_eval_every() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    #[serde(default = "default_mode")]
    pub mode: FeatureMode,
    /// Seeds the class-weight rows (uniform on the sphere) and MLP weights (He normal).
    pub init_seed: u64,
    pub shuffle_seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_mode() -> FeatureMode {
    FeatureMode::FreeEmbedding
}

impl TrainConfig {
    /// Calibrated settings for [`SyntheticTask::reference`]: N = 128,
    /// T = 2000, learning rate 0.1, momentum 0.9, free embeddings, accuracy
    /// probed every 10 iterations. Init and shuffle seeds are `100 + seed`
    /// and `200 + seed`.
    pub fn reference(loss: LossSpec, seed: u64) -> Self {
        Self {
            loss,
            batch_size: 128,
            iterations: 2000,
            learning_rate: 0.1,
            momentum: 0.9,
            mode: FeatureMode::FreeEmbedding,
            init_seed: 100 + seed,
            shuffle_seed: 200 + seed,
            eval_every: 10,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.loss.validate()?;
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if let FeatureMode::Mlp { hidden } = &self.mode {
            if hidden.contains(&0) {
                return bad("MLP hidden widths must be >= 1".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

struct MlpCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Matrix>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Matrix>,
}

impl Mlp {
    fn init(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                DenseLayer {
                    weight: Matrix::from_fn(fan_out, fan_in, |_, _| {
                        std * rng.sample::<f64, _>(StandardNormal)
                    }),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.forward_cached(x).0
    }

    fn forward_cached(&self, x: &Matrix) -> (Matrix, MlpCache) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = Matrix::from_fn(h.rows(), layer.weight.rows(), |i, o| {
                dot(layer.weight.row(o), h.row(i)) + layer.bias[o]
            });
            cache.inputs.push(h);
            if l == last {
                h = z;
            } else {
                h = z.map(|v| v.max(0.0));
                cache.pre.push(z);
            }
        }
        (h, cache)
    }

    /// Parameter gradients given `∂L/∂output`, accumulated in sample order.
    fn backward(&self, cache: &MlpCache, d_out: &Matrix) -> Vec<DenseLayer> {
        let mut grads: Vec<DenseLayer> = self
            .layers
            .iter()
            .map(|l| DenseLayer {
                weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        let mut delta = d_out.clone();
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            let g = &mut grads[l];
            for i in 0..delta.rows() {
                for (o, &dv) in delta.row(i).iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    g.bias[o] += dv;
                    for (w, &x) in g.weight.row_mut(o).iter_mut().zip(input.row(i)) {
                        *w += dv * x;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.layers[l].weight;
            let pre = &cache.pre[l - 1];
            delta = Matrix::from_fn(delta.rows(), w.cols(), |i, k| {
                if pre[(i, k)] <= 0.0 {
                    return 0.0;
                }
                delta
                    .row(i)
                    .iter()
                    .enumerate()
                    .map(|(o, &dv)| dv * w[(o, k)])
                    .sum()
            });
        }
        grads
    }
}

/// Trained parameters of the feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Extractor {
    /// Learned features of the training samples; unseen points map to themselves.
    FreeEmbedding { features: Matrix },
    Mlp { network: Mlp },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub weights: Matrix,
    pub extractor: Extractor,
}

impl TrainedModel {
    /// Embeds arbitrary points of the task's embedding space.
    ///
    /// Free-embedding models have no extractor for new points, so they pass
    /// through unchanged.
    pub fn embed(&self, dataset: &Dataset, points: &Matrix) -> Matrix {
        match &self.extractor {
            Extractor::FreeEmbedding { .. } => points.clone(),
            Extractor::Mlp { network } => network.forward(&dataset.lifted(points)),
        }
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub loss: f64,
    /// Scale multiplied into the cosines; `None` for plain softmax.
    pub s_used: Option<f64>,
    /// `B_avg` behind the dynamic scale update at this iteration.
    pub b_avg: Option<f64>,
    pub theta_med: f64,
    pub theta_mean_corr: f64,
    pub theta_mean_noncorr: f64,
    /// Accuracy after this iteration's update, on probe iterations only.
    pub train_accuracy: Option<f64>,
    pub heldout_accuracy: Option<f64>,
}

pub const TRACE_CSV_HEADER: &str =
    "t,loss,s_used,b_avg,theta_med,theta_mean_corr,theta_mean_noncorr,train_accuracy,heldout_accuracy";

impl TraceRecord {
    pub fn csv_row(&self) -> String {
        use crate::fmt::sig8;
        let opt = |v: Option<f64>| v.map(sig8).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.t,
            sig8(self.loss),
            opt(self.s_used),
            opt(self.b_avg),
            sig8(self.theta_med),
            sig8(self.theta_mean_corr),
            sig8(self.theta_mean_noncorr),
            opt(self.train_accuracy),
            opt(self.heldout_accuracy)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub loss: LossSpec,
    pub records: Vec<TraceRecord>,
    pub model: TrainedModel,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 96);
        out.push_str(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    /// Iterations completed at the first probe with held-out accuracy ≥ `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.heldout_accuracy.is_some_and(|a| a >= threshold))
            .map(|r| r.t + 1)
    }

    pub fn final_heldout_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.heldout_accuracy)
    }

    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.train_accuracy)
    }
}

/// Fraction of rows whose highest-scoring class is their label.
///
/// Plain softmax scores by inner product, every other kind by cosine.
pub fn accuracy(kind: LossKind, features: &Matrix, labels: &[usize], weights: &Matrix) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let (x, w) = if kind == LossKind::PlainSoftmax {
        (features.clone(), weights.clone())
    } else {
        match (normalize_rows(features), normalize_rows(weights)) {
            (Ok((x, _)), Ok((w, _))) => (x, w),
            _ => return f64::NAN,
        }
    };
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for j in 0..w.rows() {
                let s = dot(x.row(i), w.row(j));
                if s > best_score {
                    best_score = s;
                    best = j;
                }
            }
            best == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Epoch-wise shuffled index stream; a trailing partial batch is dropped.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
            batch,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.reshuffle();
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

fn momentum_step(param: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, mu: f64) {
    for ((p, v), &g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}

fn init_class_weights(classes: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..classes).map(|_| unit_row(&mut rng, dim)).collect();
    Matrix::from_rows(&rows).expect("uniform rows")
}

enum ExtractorState {
    Free { features: Matrix, velocity: Matrix },
    Mlp { network: Mlp, velocity: Vec<DenseLayer>, inputs: Matrix },
}

fn diverged(t: usize, e: impl std::fmt::Display) -> TrainError {
    TrainError::Diverged {
        t,
        reason: e.to_string(),
    }
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainTrace, TrainError> {
    config.validate()?;
    let task = &dataset.task;
    let n_train = dataset.train.len();
    if config.batch_size > n_train {
        return Err(TrainError::InvalidConfig(format!(
            "batch_size {} exceeds the {n_train} training samples",
            config.batch_size
        )));
    }
    let classes = task.classes;
    let kind = config.loss.kind();
    let (lr, mu) = (config.learning_rate, config.momentum);

    let mut weights = ClassWeightMatrix::new(init_class_weights(classes, task.dim, config.init_seed))?;
    let mut w_velocity = Matrix::zeros(classes, task.dim);

    let mut extractor = match &config.mode {
        FeatureMode::FreeEmbedding => ExtractorState::Free {
            features: dataset.train.points.clone(),
            velocity: Matrix::zeros(n_train, task.dim),
        },
        FeatureMode::Mlp { hidden } => {
            let mut widths = vec![task.input_dim];
            widths.extend_from_slice(hidden);
            widths.push(task.dim);
            // Separate stream from the class-weight draw.
            let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
            rng.set_stream(1);
            let network = Mlp::init(&widths, &mut rng);
            let velocity = network
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect();
            ExtractorState::Mlp {
                network,
                velocity,
                inputs: dataset.lifted(&dataset.train.points),
            }
        }
    };
    let heldout_inputs = match &config.mode {
        FeatureMode::Mlp { .. } => Some(dataset.lifted(&dataset.heldout.points)),
        FeatureMode::FreeEmbedding => None,
    };

    let fixed = match kind {
        LossKind::AdaCosFixed => Some(fixed_scale(classes).map_err(|e| TrainError::InvalidConfig(e.to_string()))?),
        _ => None,
    };
    let mut scale_state = match kind {
        LossKind::AdaCosDynamic => {
            Some(ScaleState::new(classes).map_err(|e| TrainError::InvalidConfig(e.to_string()))?)
        }
        _ => None,
    };

    let mut sampler = BatchSampler::new(n_train, config.batch_size, config.shuffle_seed);
    let mut records = Vec::with_capacity(config.iterations);

    for t in 0..config.iterations {
        let idx = sampler.next_batch();
        let labels: Vec<usize> = idx.iter().map(|&i| dataset.train.labels[i]).collect();

        let (features, mlp_cache) = match &extractor {
            ExtractorState::Free { features, .. } => (features.select_rows(&idx), None),
            ExtractorState::Mlp { network, inputs, .. } => {
                let (out, cache) = network.forward_cached(&inputs.select_rows(&idx));
                (out, Some(cache))
            }
        };
        let batch = EmbeddingBatch::new(features, labels)?;

        let cos = cosine_matrix(&batch, &weights).map_err(|e| diverged(t, e))?;
        let ang = angles(&cos);
        let stats = angle_stats(&ang, batch.labels())?;

        // Update-then-forward: the new scale governs this iteration's loss.
        let mut b_avg = None;
        let scale = match kind {
            LossKind::PlainSoftmax => None,
            LossKind::AdaCosFixed => fixed,
            LossKind::AdaCosDynamic => {
                let st = scale_state.as_mut().expect("dynamic state");
                if t > 0 {
                    let rec = st.update(&cos, &ang, batch.labels()).map_err(|e: ScaleError| diverged(t, e))?;
                    b_avg = Some(rec.b_avg);
                }
                Some(st.scale())
            }
            _ => config.loss.scale(),
        };

        let grads = gradients(&config.loss, &batch, &weights, scale).map_err(|e| match e {
            LossError::Geometry(g) => diverged(t, g),
            other => TrainError::Loss(other),
        })?;
        if !grads.loss.is_finite() {
            return Err(diverged(t, format!("non-finite loss {}", grads.loss)));
        }

        momentum_step(
            weights.weights_mut().as_mut_slice(),
            w_velocity.as_mut_slice(),
            grads.d_weights.as_slice(),
            lr,
            mu,
        );
        match &mut extractor {
            ExtractorState::Free { features, velocity } => {
                for (k, &i) in idx.iter().enumerate() {
                    momentum_step(
                        features.row_mut(i),
                        velocity.row_mut(i),
                        grads.d_features.row(k),
                        lr,
                        mu,
                    );
                }
            }
            ExtractorState::Mlp { network, velocity, .. } => {
                let cache = mlp_cache.expect("MLP forward cache");
                let layer_grads = network.backward(&cache, &grads.d_features);
                for ((layer, vel), g) in network.layers.iter_mut().zip(velocity.iter_mut()).zip(&layer_grads) {
                    momentum_step(layer.weight.as_mut_slice(), vel.weight.as_mut_slice(), g.weight.as_slice(), lr, mu);
                    momentum_step(&mut layer.bias, &mut vel.bias, &g.bias, lr, mu);
                }
            }
        }
        if weights.weights().as_slice().iter().any(|v| !v.is_finite()) {
            return Err(diverged(t, "non-finite class weights"));
        }

        let probe = (t + 1) % config.eval_every == 0 || t + 1 == config.iterations;
        let (train_accuracy, heldout_accuracy) = if probe {
            let w = weights.weights();
            let (train_feats, heldout_feats) = match &extractor {
                ExtractorState::Free { features, .. } => (features.clone(), dataset.heldout.points.clone()),
                ExtractorState::Mlp { network, inputs, .. } => (
                    network.forward(inputs),
                    network.forward(heldout_inputs.as_ref().expect("held-out inputs")),
                ),
            };
            (
                Some(accuracy(kind, &train_feats, &dataset.train.labels, w)),
                Some(accuracy(kind, &heldout_feats, &dataset.heldout.labels, w)),
            )
        } else {
            (None, None)
        };

        records.push(TraceRecord {
            t,
            loss: grads.loss,
            s_used: scale,
            b_avg,
            theta_med: stats.median_corr,
            theta_mean_corr: stats.mean_corr,
            theta_mean_noncorr: stats.mean_noncorr,
            train_accuracy,
            heldout_accuracy,
        });
    }

    let extractor = match extractor {
        ExtractorState::Free { features, .. } => Extractor::FreeEmbedding { features },
        ExtractorState::Mlp { network, .. } => Extractor::Mlp { network },
    };
    Ok(TrainTrace {
        loss: config.loss,
        records,
        model: TrainedModel {
            weights: weights.into_matrix(),
            extractor,
        },
    })
}

/// One row of a convergence comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub loss: String,
    /// Iterations completed at the first probe reaching the threshold.
    pub iterations_to_threshold: Option<usize>,
    pub final_heldout_accuracy: Option<f64>,
}

/// Trains each config on the same dataset and reports iterations to `threshold`
/// held-out accuracy, in the given order.
///
/// All configs must agree on everything except the loss.
pub fn compare(
    dataset: &Dataset,
    configs: &[TrainConfig],
    threshold: f64,
) -> Result<Vec<CompareRow>, TrainError> {
    if let Some(first) = configs.first() {
        for c in &configs[1..] {
            let same = TrainConfig {
                loss: first.loss,
                ..c.clone()
            };
            if &same != first {
                return Err(TrainError::InvalidConfig(
                    "compared configs may differ only in their loss".into(),
                ));
            }
        }
    }
    configs
        .iter()
        .map(|cfg| {
            let trace = train(dataset, cfg)?;
            Ok(CompareRow {
                loss: cfg.loss.label(),
                iterations_to_threshold: trace.iterations_to(threshold),
                final_heldout_accuracy: trace.final_heldout_accuracy(),
            })
        })
        .collect()
}
