//! Desk-scale check of KDE selection against random selection.
//!
//! A two-layer tanh classifier is pre-trained on a broad variant of a
//! synthetic Gaussian task, fine-tuned on the target variant, then pruned
//! across a k-sweep with both strategies and scored by weighted F1 on the
//! target test split.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::pruner::{prune_snapshot_with, PruneConfig, PruneError, SelectionStrategy};
use crate::tensor_store::{validate_pair, ModelSnapshot, PairReport, StoreError, WeightMatrix};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("empty input")]
    EmptyInput,
    #[error("label vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    DivergedLoss { epoch: usize, loss: f64 },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("snapshot is not a tiny model: {0}")]
    NotATinyModel(String),
    #[error("incompatible model pair: {0}")]
    IncompatiblePair(PairReport),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Isotropic Gaussian classes around seeded means.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub classes: usize,
    pub input_dim: usize,
    /// Norm of every class mean.
    pub separation: f64,
    /// Shared per-coordinate noise scale.
    pub sigma: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Drives class means and samples.
    pub seed: u64,
}

impl SyntheticTask {
    fn validate(&self) -> Result<(), BenchError> {
        if self.classes < 2 {
            return Err(BenchError::InvalidTask("need at least 2 classes".into()));
        }
        if self.input_dim == 0 {
            return Err(BenchError::InvalidTask("input_dim must be positive".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite() && self.separation.is_finite()) {
            return Err(BenchError::InvalidTask(
                "sigma must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// Same class means, noise scaled by `factor`, samples from another stream.
    pub fn broadened(&self, factor: f64) -> Self {
        Self {
            sigma: self.sigma * factor,
            seed: self.seed ^ (0x9e37_79b9 << 32),
            ..self.clone()
        }
    }

    pub fn class_means(&self) -> Vec<Vec<f64>> {
        // Means depend only on the low 32 bits so `broadened` keeps them.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed & 0xffff_ffff);
        (0..self.classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.input_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let norm = v
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x * self.separation / norm).collect()
            })
            .collect()
    }
}

/// Row-major samples with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub x: Vec<f32>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn draw(task: &SyntheticTask, means: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let mut x = Vec::with_capacity(n * task.input_dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % task.classes;
        for &mu in &means[c] {
            let z: f64 = rng.sample(StandardNormal);
            x.push((mu + task.sigma * z) as f32);
        }
        y.push(c);
    }
    Dataset {
        dim: task.input_dim,
        x,
        y,
    }
}

/// Balanced train/val/test splits, each drawn from its own stream.
pub fn generate_task(task: &SyntheticTask) -> Result<TaskSplits, BenchError> {
    task.validate()?;
    let means = task.class_means();
    let split = |stream: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
        rng.set_stream(stream + 1);
        draw(task, &means, n, &mut rng)
    };
    Ok(TaskSplits {
        train: split(0, task.n_train),
        val: split(1, task.n_val),
        test: split(2, task.n_test),
    })
}

/// `input -> tanh(x W1 + b1) -> W2 + b2 -> logits`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    pub w1: WeightMatrix,
    pub b1: WeightMatrix,
    pub w2: WeightMatrix,
    pub b2: WeightMatrix,
}

pub const TINY_MODEL_NAMES: [&str; 4] = ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"];

impl TinyModel {
    /// Seeded Glorot-style normal init, zero biases.
    pub fn init(
        input_dim: usize,
        hidden: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self, BenchError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, fan_in: usize, fan_out: usize| -> Vec<f32> {
            let scale = (2.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n)
                .map(|_| (scale * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect()
        };
        let w1 = normal(input_dim * hidden, input_dim, hidden);
        let w2 = normal(hidden * classes, hidden, classes);
        Ok(Self {
            w1: WeightMatrix::new(TINY_MODEL_NAMES[0], input_dim, hidden, w1)?,
            b1: WeightMatrix::new(TINY_MODEL_NAMES[1], 1, hidden, vec![0.0; hidden])?,
            w2: WeightMatrix::new(TINY_MODEL_NAMES[2], hidden, classes, w2)?,
            b2: WeightMatrix::new(TINY_MODEL_NAMES[3], 1, classes, vec![0.0; classes])?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn classes(&self) -> usize {
        self.w2.cols()
    }

    /// Longest row among the four matrices (the hidden width).
    pub fn max_row_len(&self) -> usize {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .map(|m| m.cols())
            .max()
            .unwrap_or(0)
    }

    fn hidden_activations(&self, x: &[f32], out: &mut [f32]) {
        out.copy_from_slice(self.b1.data());
        for (xi, row) in x.iter().zip(self.w1.rows_iter()) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        for o in out.iter_mut() {
            *o = o.tanh();
        }
    }

    fn logits_from_hidden(&self, hidden: &[f32], out: &mut [f32]) {
        out.copy_from_slice(self.b2.data());
        for (hj, row) in hidden.iter().zip(self.w2.rows_iter()) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += hj * w;
            }
        }
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f32> {
        let mut hidden = vec![0.0; self.hidden()];
        let mut out = vec![0.0; self.classes()];
        self.hidden_activations(x, &mut hidden);
        self.logits_from_hidden(&hidden, &mut out);
        out
    }

    /// Arg-max class per sample; ties go to the lower class index.
    pub fn predict(&self, data: &Dataset) -> Vec<usize> {
        (0..data.len())
            .map(|i| {
                let logits = self.logits(data.sample(i));
                let mut best = 0;
                for (c, &v) in logits.iter().enumerate() {
                    if v > logits[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    pub fn to_snapshot(&self) -> ModelSnapshot {
        ModelSnapshot::new(vec![
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
        ])
        .expect("fixed distinct names")
    }

    pub fn from_snapshot(snapshot: &ModelSnapshot) -> Result<Self, BenchError> {
        let take = |name: &str| {
            snapshot
                .get(name)
                .cloned()
                .ok_or_else(|| BenchError::NotATinyModel(format!("missing `{name}`")))
        };
        let model = Self {
            w1: take(TINY_MODEL_NAMES[0])?,
            b1: take(TINY_MODEL_NAMES[1])?,
            w2: take(TINY_MODEL_NAMES[2])?,
            b2: take(TINY_MODEL_NAMES[3])?,
        };
        let h = model.w1.cols();
        let c = model.w2.cols();
        if model.b1.shape() != (1, h) || model.w2.rows() != h || model.b2.shape() != (1, c) {
            return Err(BenchError::NotATinyModel(
                "inconsistent layer shapes".into(),
            ));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Shuffling seed.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: TinyModel,
    /// Mean training cross-entropy of each epoch (measured during the epoch).
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD on softmax cross-entropy. Single-threaded and fully
/// determined by the inputs.
pub fn train(model: &TinyModel, data: &Dataset, cfg: &TrainConfig) -> Result<Trained, BenchError> {
    if data.dim != model.input_dim() {
        return Err(BenchError::InvalidTask(format!(
            "data has {} features, model expects {}",
            data.dim,
            model.input_dim()
        )));
    }
    if let Some(&label) = data.y.iter().find(|&&l| l >= model.classes()) {
        return Err(BenchError::LabelOutOfRange {
            label,
            classes: model.classes(),
        });
    }
    let (d, h, c) = (model.input_dim(), model.hidden(), model.classes());
    let mut w1 = model.w1.data().to_vec();
    let mut b1 = model.b1.data().to_vec();
    let mut w2 = model.w2.data().to_vec();
    let mut b2 = model.b2.data().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = cfg.batch_size.max(1);
    let mut losses = Vec::with_capacity(cfg.epochs);

    let (mut gw1, mut gb1) = (vec![0f32; d * h], vec![0f32; h]);
    let (mut gw2, mut gb2) = (vec![0f32; h * c], vec![0f32; c]);
    let (mut hid, mut logits, mut dh) = (vec![0f32; h], vec![0f32; c], vec![0f32; h]);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(batch) {
            gw1.fill(0.0);
            gb1.fill(0.0);
            gw2.fill(0.0);
            gb2.fill(0.0);
            for &i in chunk {
                let x = data.sample(i);
                hid.copy_from_slice(&b1);
                for (a, &xi) in x.iter().enumerate() {
                    for (o, w) in hid.iter_mut().zip(&w1[a * h..(a + 1) * h]) {
                        *o += xi * w;
                    }
                }
                hid.iter_mut().for_each(|v| *v = v.tanh());
                logits.copy_from_slice(&b2);
                for (j, &hj) in hid.iter().enumerate() {
                    for (o, w) in logits.iter_mut().zip(&w2[j * c..(j + 1) * c]) {
                        *o += hj * w;
                    }
                }
                let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f32;
                for v in logits.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                let y = data.y[i];
                total -= f64::from((logits[y] / z).ln());
                // logits now holds softmax - onehot
                for v in logits.iter_mut() {
                    *v /= z;
                }
                logits[y] -= 1.0;
                for (g, &dl) in gb2.iter_mut().zip(logits.iter()) {
                    *g += dl;
                }
                for j in 0..h {
                    let mut back = 0.0f32;
                    for (k, &dl) in logits.iter().enumerate() {
                        gw2[j * c + k] += hid[j] * dl;
                        back += w2[j * c + k] * dl;
                    }
                    dh[j] = back * (1.0 - hid[j] * hid[j]);
                }
                for (g, &v) in gb1.iter_mut().zip(dh.iter()) {
                    *g += v;
                }
                for (a, &xi) in x.iter().enumerate() {
                    for (g, &v) in gw1[a * h..(a + 1) * h].iter_mut().zip(dh.iter()) {
                        *g += xi * v;
                    }
                }
            }
            let step = cfg.learning_rate / chunk.len() as f32;
            for (p, g) in [
                (&mut w1, &gw1),
                (&mut b1, &gb1),
                (&mut w2, &gw2),
                (&mut b2, &gb2),
            ] {
                for (w, &gv) in p.iter_mut().zip(g.iter()) {
                    *w -= step * gv;
                }
            }
        }
        let loss = total / data.len().max(1) as f64;
        let params_finite = [&w1, &b1, &w2, &b2]
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()));
        if !loss.is_finite() || !params_finite {
            return Err(BenchError::DivergedLoss { epoch, loss });
        }
        losses.push(loss);
    }
    Ok(Trained {
        model: TinyModel {
            w1: model.w1.with_data(w1)?,
            b1: model.b1.with_data(b1)?,
            w2: model.w2.with_data(w2)?,
            b2: model.b2.with_data(b2)?,
        },
        epoch_losses: losses,
    })
}

/// Support-weighted mean of per-class F1. A class with `P + R = 0` scores 0.
pub fn f1_weighted(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<f64, BenchError> {
    if y_true.is_empty() {
        return Err(BenchError::EmptyInput);
    }
    if y_true.len() != y_pred.len() {
        return Err(BenchError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for label in [t, p] {
            if label >= classes {
                return Err(BenchError::LabelOutOfRange { label, classes });
            }
        }
        support[t] += 1;
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
        }
    }
    let n = y_true.len() as f64;
    let score = (0..classes)
        .map(|c| {
            if support[c] == 0 {
                return 0.0;
            }
            let tp = tp[c] as f64;
            let predicted = tp + fp[c] as f64;
            let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let recall = tp / support[c] as f64;
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            support[c] as f64 / n * f1
        })
        .sum();
    Ok(score)
}

pub fn evaluate(model: &TinyModel, data: &Dataset) -> Result<f64, BenchError> {
    f1_weighted(&data.y, &model.predict(data), model.classes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BenchStrategy {
    Kde,
    Random,
}

impl BenchStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchStrategy::Kde => "kde",
            BenchStrategy::Random => "random",
        }
    }

    fn selection(self, seed: u64) -> SelectionStrategy {
        match self {
            BenchStrategy::Kde => SelectionStrategy::Kde,
            BenchStrategy::Random => SelectionStrategy::Random { seed },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub strategy: BenchStrategy,
    pub k: usize,
    pub seed: u64,
    pub reset_fraction: f64,
    pub f1_weighted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub strategy: BenchStrategy,
    pub k: usize,
    pub runs: usize,
    pub mean_f1: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_f1: f64,
    pub reset_fraction: f64,
}

impl CellSummary {
    pub fn error_rate(&self) -> f64 {
        1.0 - self.mean_f1
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
}

impl BenchReport {
    pub fn merge(mut self, other: BenchReport) -> Self {
        self.records.extend(other.records);
        self
    }

    /// One summary per (strategy, k), ordered by strategy then k.
    pub fn summarize(&self) -> Vec<CellSummary> {
        let mut keys: Vec<(BenchStrategy, usize)> =
            self.records.iter().map(|r| (r.strategy, r.k)).collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter()
            .map(|(strategy, k)| {
                let cell: Vec<&BenchRecord> = self
                    .records
                    .iter()
                    .filter(|r| r.strategy == strategy && r.k == k)
                    .collect();
                let n = cell.len() as f64;
                let mean = cell.iter().map(|r| r.f1_weighted).sum::<f64>() / n;
                let std = if cell.len() > 1 {
                    (cell
                        .iter()
                        .map(|r| (r.f1_weighted - mean).powi(2))
                        .sum::<f64>()
                        / (n - 1.0))
                        .sqrt()
                } else {
                    0.0
                };
                CellSummary {
                    strategy,
                    k,
                    runs: cell.len(),
                    mean_f1: mean,
                    std_f1: std,
                    reset_fraction: cell[0].reset_fraction,
                }
            })
            .collect()
    }

    pub fn mean_f1(&self, strategy: BenchStrategy, k: usize) -> Option<f64> {
        self.summarize()
            .into_iter()
            .find(|s| s.strategy == strategy && s.k == k)
            .map(|s| s.mean_f1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,k,seed,reset_fraction,f1_weighted\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6}",
                r.strategy.as_str(),
                r.k,
                r.seed,
                r.reset_fraction,
                r.f1_weighted
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Smallest swept k from which every larger swept k keeps the mean KDE
/// score within `band` of `fine_f1`. `None` if even the largest k misses.
pub fn degradation_threshold(summary: &[CellSummary], fine_f1: f64, band: f64) -> Option<usize> {
    let mut kde: Vec<&CellSummary> = summary
        .iter()
        .filter(|s| s.strategy == BenchStrategy::Kde)
        .collect();
    kde.sort_by_key(|s| s.k);
    let mut threshold = None;
    for s in kde.iter().rev() {
        if s.mean_f1 >= fine_f1 - band {
            threshold = Some(s.k);
        } else {
            break;
        }
    }
    threshold
}

/// Prunes `fine` toward `pre` for every `(k, seed)` and scores the result on
/// `test`. Cells run in parallel; the report order is `k`-major, then seed.
pub fn run_sweep(
    pre: &TinyModel,
    fine: &TinyModel,
    test: &Dataset,
    ks: &[usize],
    seeds: &[u64],
    strategy: BenchStrategy,
) -> Result<BenchReport, BenchError> {
    let pre_snap = pre.to_snapshot();
    let fine_snap = fine.to_snapshot();
    let report = validate_pair(&pre_snap, &fine_snap);
    if !report.is_compatible() {
        return Err(BenchError::IncompatiblePair(report));
    }
    let cells: Vec<(usize, u64)> = ks
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let records = cells
        .par_iter()
        .map(|&(k, seed)| {
            let out = prune_snapshot_with(
                &pre_snap,
                &fine_snap,
                &PruneConfig::new(k),
                strategy.selection(seed),
            )?;
            let model = TinyModel::from_snapshot(&out.snapshot)?;
            Ok(BenchRecord {
                strategy,
                k,
                seed,
                reset_fraction: out.stats.reset_fraction(),
                f1_weighted: evaluate(&model, test)?,
            })
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    Ok(BenchReport { records })
}

/// The documented reference experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchSetup {
    pub task: SyntheticTask,
    /// Noise multiplier of the pre-training variant.
    pub pretrain_broadening: f64,
    pub hidden: usize,
    pub init_seed: u64,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl BenchSetup {
    /// C = 4, d = 32, h = 16.
    pub fn reference() -> Self {
        Self {
            task: SyntheticTask {
                classes: 4,
                input_dim: 32,
                separation: 3.0,
                sigma: 1.0,
                n_train: 2000,
                n_val: 500,
                n_test: 2000,
                seed: 20_240_131,
            },
            pretrain_broadening: 3.0,
            hidden: 16,
            init_seed: 7,
            pretrain: TrainConfig {
                epochs: 20,
                learning_rate: 0.05,
                batch_size: 32,
                seed: 11,
            },
            finetune: TrainConfig {
                epochs: 20,
                learning_rate: 0.05,
                batch_size: 32,
                seed: 13,
            },
        }
    }
}

/// Pre-trained and fine-tuned models plus the target splits.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub pre: TinyModel,
    pub fine: TinyModel,
    pub splits: TaskSplits,
    pub pre_f1: f64,
    pub fine_f1: f64,
}

pub fn prepare(setup: &BenchSetup) -> Result<PreparedPair, BenchError> {
    let target = generate_task(&setup.task)?;
    let broad = generate_task(&setup.task.broadened(setup.pretrain_broadening))?;
    let init = TinyModel::init(
        setup.task.input_dim,
        setup.hidden,
        setup.task.classes,
        setup.init_seed,
    )?;
    let pre = train(&init, &broad.train, &setup.pretrain)?.model;
    let fine = train(&pre, &target.train, &setup.finetune)?.model;
    let pre_f1 = evaluate(&pre, &target.test)?;
    let fine_f1 = evaluate(&fine, &target.test)?;
    Ok(PreparedPair {
        pre,
        fine,
        splits: target,
        pre_f1,
        fine_f1,
    })
}
