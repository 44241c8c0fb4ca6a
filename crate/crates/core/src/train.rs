//! Network assembly and the multi-seed training protocol: 80/10/10 splits,
//! Adam on shuffled mini-batches, early stopping on validation accuracy and
//! test accuracy of the best-validation parameters.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{split_dataset, Batch, Dataset, GraphError};
use crate::nn::{check_pool_invariants, Adam, Mode, Model, ModelConfig, NnError, ParamCount, PoolConfig, Step};
use crate::spectral::KernelKind;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),

    #[error("cannot evaluate on an empty index list")]
    EmptyIndices,

    #[error(transparent)]
    Graph(#[from] GraphError),

    #[error(transparent)]
    Nn(#[from] NnError),

    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),

    #[error("writing report: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    #[default]
    Licheb,
    Limixhop,
}

impl ConvKind {
    pub fn kernel(self) -> KernelKind {
        match self {
            ConvKind::Licheb => KernelKind::Chebyshev,
            ConvKind::Limixhop => KernelKind::Mixhop,
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ConvKind::Licheb => "LiCheb",
            ConvKind::Limixhop => "LiMixhop",
        }
    }
}

/// Benchmark order used for the per-dataset pooling ratios and the report row.
pub const BENCHMARKS: [&str; 6] = ["PROTEINS", "DD", "NCI1", "NCI109", "Mutagenicity", "FRANKENSTEIN"];
const NODE_RATIOS: [f64; 6] = [0.6, 0.8, 0.9, 0.9, 0.9, 0.9];
const EDGE_RATIOS: [f64; 6] = [0.8, 0.7, 0.9, 0.4, 0.7, 0.6];
const REPORT_COLUMNS: [&str; 6] = ["Pro", "D&D", "NCI1", "NCI109", "Mut", "Far"];
const FALLBACK_RATIO: f64 = 0.9;

fn benchmark_index(dataset: &str) -> Option<usize> {
    BENCHMARKS.iter().position(|b| b.eq_ignore_ascii_case(dataset))
}

/// `(rho_v, rho_e)` defaults for a dataset name; unknown names get 0.9 for both.
pub fn default_ratios(dataset: &str) -> (f64, f64) {
    benchmark_index(dataset)
        .map(|i| (NODE_RATIOS[i], EDGE_RATIOS[i]))
        .unwrap_or((FALLBACK_RATIO, FALLBACK_RATIO))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: String,
    pub conv: ConvKind,
    pub k: usize,
    pub layers: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-dataset default when absent.
    pub rho_v: Option<f64>,
    /// Per-dataset default when absent.
    pub rho_e: Option<f64>,
    pub nf: bool,
    pub pool_nodes: bool,
    pub pool_edges: bool,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: String::new(),
            conv: ConvKind::Licheb,
            k: 2,
            layers: 5,
            hidden: 128,
            batch_size: 256,
            lr: 0.001,
            rho_v: None,
            rho_e: None,
            nf: true,
            pool_nodes: true,
            pool_edges: true,
            dropout: 0.5,
            max_epochs: 500,
            patience: 30,
            seeds: (0..10).collect(),
        }
    }
}

impl TrainConfig {
    pub fn for_dataset(dataset: &str) -> Self {
        Self {
            dataset: dataset.to_string(),
            ..Self::default()
        }
    }

    /// Copy with the pooling ratios filled in from the dataset defaults.
    pub fn resolved(&self) -> Self {
        let (v, e) = default_ratios(&self.dataset);
        Self {
            rho_v: Some(self.rho_v.unwrap_or(v)),
            rho_e: Some(self.rho_e.unwrap_or(e)),
            ..self.clone()
        }
    }

    pub fn pooling_enabled(&self) -> bool {
        self.pool_nodes || self.pool_edges
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.layers < 1 {
            return fail("layers must be at least 1".into());
        }
        if self.hidden < 1 || self.batch_size < 1 {
            return fail("hidden and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.max_epochs < 1 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return fail("seeds must be distinct".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        let r = self.resolved();
        for (name, v) in [("rho_v", r.rho_v), ("rho_e", r.rho_e)] {
            let v = v.unwrap_or_default();
            if !(v > 0.0 && v <= 1.0) {
                return fail(format!("{name} must lie in (0, 1], got {v}"));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, in_dim: usize, classes: usize) -> ModelConfig {
        let r = self.resolved();
        let pool = self.pooling_enabled().then(|| PoolConfig {
            node_ratio: r.rho_v.unwrap_or(FALLBACK_RATIO),
            edge_ratio: r.rho_e.unwrap_or(FALLBACK_RATIO),
            normalize: self.nf,
            pool_nodes: self.pool_nodes,
            pool_edges: self.pool_edges,
        });
        ModelConfig {
            kernel: self.conv.kernel(),
            k: self.k,
            layers: self.layers,
            in_dim,
            hidden: self.hidden,
            classes,
            pool,
            dropout: self.dropout,
        }
    }

    /// Row label in the style of the result tables, e.g. `LiCheb(NF+pN+pE)`.
    pub fn model_label(&self) -> String {
        let mut parts = Vec::new();
        if self.pooling_enabled() {
            parts.push(if self.nf { "NF" } else { "noNF" });
        }
        if self.pool_nodes {
            parts.push("pN");
        }
        if self.pool_edges {
            parts.push("pE");
        }
        if parts.is_empty() {
            self.conv.display_name().to_string()
        } else {
            format!("{}({})", self.conv.display_name(), parts.join("+"))
        }
    }
}

pub fn build_model(cfg: &TrainConfig, in_dim: usize, classes: usize, seed: u64) -> Result<Model, TrainError> {
    cfg.validate()?;
    Ok(Model::new(cfg.model_config(in_dim, classes), seed)?)
}

/// Patience-based stopping on validation accuracy, ties broken by lower
/// validation loss. Epochs are numbered from 1.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best_accuracy: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_accuracy: f64::NEG_INFINITY,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records one epoch; returns whether it became the new best.
    pub fn observe(&mut self, epoch: usize, accuracy: f64, loss: f64) -> bool {
        let better = accuracy > self.best_accuracy || (accuracy == self.best_accuracy && loss < self.best_loss);
        if better {
            self.best_accuracy = accuracy;
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        better
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

fn batches<'a>(ds: &'a Dataset, indices: &[usize], batch_size: usize) -> Result<Vec<Batch>, TrainError> {
    indices
        .chunks(batch_size.max(1))
        .map(|chunk| Ok(Batch::from_graphs(chunk.iter().map(|&i| &ds.graphs[i]))?))
        .collect()
}

fn evaluate_batches(model: &Model, batches: &[Batch]) -> Result<Evaluation, TrainError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut loss_sum = 0.0;
    for batch in batches {
        let logits = model.predict(batch)?;
        for (row, &label) in logits.rows().into_iter().zip(&batch.labels) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss_sum += lse - row[label];
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                .0;
            correct += usize::from(pred == label);
            total += 1;
        }
    }
    if total == 0 {
        return Err(TrainError::EmptyIndices);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / total as f64,
        loss: loss_sum / total as f64,
    })
}

/// Accuracy and mean cross-entropy of `model` on the listed graphs, dropout off.
pub fn evaluate_with_loss(model: &Model, indices: &[usize], ds: &Dataset, batch_size: usize) -> Result<Evaluation, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::EmptyIndices);
    }
    evaluate_batches(model, &batches(ds, indices, batch_size)?)
}

pub fn evaluate(model: &Model, indices: &[usize], ds: &Dataset) -> Result<f64, TrainError> {
    Ok(evaluate_with_loss(model, indices, ds, 256)?.accuracy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// `None` when the seed failed.
    pub test_accuracy: Option<f64>,
    pub val_accuracy: f64,
    pub best_epoch: usize,
    pub epochs: usize,
    pub seconds: f64,
    pub pool_checks: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub model: String,
    pub config: TrainConfig,
    pub per_seed: Vec<SeedResult>,
    pub mean: f64,
    /// Sample standard deviation over the successful seeds.
    pub std: f64,
    pub params: ParamCount,
    pub seconds_per_epoch: f64,
    pub total_seconds: f64,
    pub majority_baseline: f64,
    pub failed_seeds: Vec<u64>,
    pub pool_violations: Vec<String>,
}

/// Full training run for one seed.
pub struct SeedRun {
    pub result: SeedResult,
    pub model: Model,
    pub pool_violations: Vec<String>,
}

const SHUFFLE_STREAM: u64 = 0x5eed_0f_5b47c4;

pub fn train_seed(cfg: &TrainConfig, ds: &Dataset, seed: u64) -> Result<SeedRun, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let split = split_dataset(ds, seed)?;
    let mut model = build_model(cfg, ds.num_features, ds.num_classes, seed)?;
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM);
    let val_batches = batches(ds, &split.val, cfg.batch_size)?;
    let pool_config = cfg.model_config(ds.num_features, ds.num_classes).pool;

    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.params.clone();
    let mut train = split.train.clone();
    let mut epochs = 0;
    let mut pool_checks = 0;
    let mut violations = Vec::new();
    let mut error = None;

    'epochs: for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        train.shuffle(&mut rng);
        for chunk in train.chunks(cfg.batch_size) {
            let batch = Batch::from_graphs(chunk.iter().map(|&i| &ds.graphs[i]))?;
            let step: Step = match model.loss_and_backward(&batch, Mode::Train(&mut rng)) {
                Ok(step) => step,
                Err(e @ NnError::NonFinite { .. }) => {
                    error = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            };
            if let Some(pc) = &pool_config {
                for (layer, (input, result)) in step.pools.iter().enumerate() {
                    pool_checks += 1;
                    if let Err(msg) = check_pool_invariants(input, result, pc) {
                        violations.push(format!("seed {seed} epoch {epoch} layer {layer}: {msg}"));
                    }
                }
            }
            adam.step(&mut model.params, &step.grads);
        }
        let val = match evaluate_batches(&model, &val_batches) {
            Ok(v) => v,
            Err(TrainError::Nn(e @ NnError::NonFinite { .. })) => {
                error = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        log::debug!("seed {seed} epoch {epoch}: val acc {:.4} loss {:.4}", val.accuracy, val.loss);
        if stopper.observe(epoch, val.accuracy, val.loss) {
            best = model.params.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }

    let test_accuracy = if error.is_none() {
        model.load_params(best)?;
        Some(evaluate_with_loss(&model, &split.test, ds, cfg.batch_size)?.accuracy)
    } else {
        None
    };
    Ok(SeedRun {
        result: SeedResult {
            seed,
            test_accuracy,
            val_accuracy: stopper.best_accuracy.max(0.0),
            best_epoch: stopper.best_epoch,
            epochs,
            seconds: started.elapsed().as_secs_f64(),
            pool_checks,
            error,
        },
        model,
        pool_violations: violations,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every configured seed (in parallel) and aggregates in seed order.
pub fn run_experiment(cfg: &TrainConfig, ds: &Dataset) -> Result<RunReport, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let runs: Vec<SeedRun> = cfg
        .seeds
        .par_iter()
        .map(|&seed| train_seed(cfg, ds, seed))
        .collect::<Result<_, _>>()?;

    let accuracies: Vec<f64> = runs.iter().filter_map(|r| r.result.test_accuracy).collect();
    let (mean, std) = mean_std(&accuracies);
    let total_epochs: usize = runs.iter().map(|r| r.result.epochs).sum();
    let train_seconds: f64 = runs.iter().map(|r| r.result.seconds).sum();
    let params = build_model(cfg, ds.num_features, ds.num_classes, 0)?.param_count();

    Ok(RunReport {
        dataset: ds.name.clone(),
        model: cfg.model_label(),
        config: cfg.resolved(),
        mean,
        std,
        params,
        seconds_per_epoch: train_seconds / total_epochs.max(1) as f64,
        total_seconds: started.elapsed().as_secs_f64(),
        majority_baseline: ds.majority_baseline(),
        failed_seeds: runs.iter().filter(|r| r.result.error.is_some()).map(|r| r.result.seed).collect(),
        pool_violations: runs.iter().flat_map(|r| r.pool_violations.iter().cloned()).collect(),
        per_seed: runs.into_iter().map(|r| r.result).collect(),
    })
}

impl RunReport {
    pub fn pool_checks(&self) -> usize {
        self.per_seed.iter().map(|s| s.pool_checks).sum()
    }

    pub fn accuracies(&self) -> Vec<Option<f64>> {
        self.per_seed.iter().map(|s| s.test_accuracy).collect()
    }

    /// `mean ± std` in percent, as in the result tables.
    pub fn accuracy_cell(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }

    /// One result-table row: model, the six benchmark columns (only this
    /// run's column filled), parameter count and seconds over 50 epochs.
    pub fn write_csv_row<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["model"];
        header.extend(REPORT_COLUMNS);
        header.extend(["dataset", "params", "time"]);
        w.write_record(&header)?;

        let mut row = vec![self.model.clone()];
        let column = benchmark_index(&self.dataset);
        row.extend((0..REPORT_COLUMNS.len()).map(|i| {
            if Some(i) == column {
                self.accuracy_cell()
            } else {
                String::new()
            }
        }));
        row.push(if column.is_none() { self.accuracy_cell() } else { String::new() });
        row.push(format!("{:.1}k", self.params.total as f64 / 1000.0));
        row.push(format!("{:.1}s", 50.0 * self.seconds_per_epoch));
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    }

    /// Same report with every wall-clock field zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.seconds_per_epoch = 0.0;
        r.total_seconds = 0.0;
        r.per_seed.iter_mut().for_each(|s| s.seconds = 0.0);
        r
    }
}
