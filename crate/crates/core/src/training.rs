//! Probe training runs and learning-rate/momentum grid search.
//!
//! A run splits the training examples into fit and validation parts, trains
//! with mini-batch SGD until validation loss stops improving, restores the
//! best parameters and only then touches the test split.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingProvider;
use crate::metrics::{accuracy, argmax, rmse, MetricKind};
use crate::nn::{sgd_step, Module};
use crate::probes::{build_probe, Batch, ProbeConfig, ProbeModel};
use crate::synthgen::{Dataset, Example};
use crate::{Error, Result};

pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;
pub const DEFAULT_MAX_EPOCHS: usize = 1000;
pub const DEFAULT_PATIENCE: usize = 20;
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;
pub const LR_MIN: f64 = 1e-6;
pub const LR_MAX: f64 = 0.3;

pub const DEFAULT_LR_GRID: [f64; 12] = [
    3e-1, 1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5, 3e-6, 1e-6,
];
pub const DEFAULT_MOMENTUM_GRID: [f64; 2] = [0.5, 0.7];

/// Examples per forward pass when only evaluating.
const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            momentum: 0.5,
            batch_size: DEFAULT_BATCH_SIZE,
            clip_norm: DEFAULT_CLIP_NORM,
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            val_fraction: DEFAULT_VAL_FRACTION,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_lr(mut self, lr: f64, momentum: f64) -> Self {
        self.lr = lr;
        self.momentum = momentum;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, train_size: usize) -> Result<()> {
        if !(LR_MIN..=LR_MAX).contains(&self.lr) {
            return Err(Error::Config(format!(
                "learning rate {} outside [{LR_MIN}, {LR_MAX}]",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(Error::Config(format!(
                "validation fraction {} outside (0, 0.5)",
                self.val_fraction
            )));
        }
        if self.batch_size == 0 || self.batch_size > train_size {
            return Err(Error::Config(format!(
                "batch size {} must be in 1..={train_size}",
                self.batch_size
            )));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm {} must be positive", self.clip_norm)));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs and patience must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// 1-based epoch with the lowest validation loss; 0 if none was finite.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_loss: Option<f64>,
    pub metric: MetricKind,
    pub test_metric: f64,
    pub val_losses: Vec<f64>,
    pub diverged: bool,
    pub wall_time_secs: f64,
}

/// What [`drive_epochs`] decided after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

/// Patience-based early stopping on a loss that should decrease.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    /// Records the next epoch's loss; strict decrease counts as improvement.
    pub fn observe(&mut self, loss: f64) -> Progress {
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epoch;
            Progress::Improved
        } else if self.epoch - self.best_epoch >= self.patience {
            Progress::Stop
        } else {
            Progress::Stalled
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> Option<f64> {
        (self.best_epoch > 0).then_some(self.best)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_loss: Option<f64>,
    pub losses: Vec<f64>,
}

/// Calls `epoch` (1-based) until early stopping or `max_epochs`, calling
/// `on_improve` after each improving epoch. An error from `epoch` aborts the
/// loop and is returned together with the summary so far.
pub fn drive_epochs(
    max_epochs: usize,
    patience: usize,
    mut epoch: impl FnMut(usize) -> Result<f64>,
    mut on_improve: impl FnMut(usize),
) -> (EpochSummary, Option<Error>) {
    let mut stopper = EarlyStopping::new(patience);
    let mut losses = Vec::new();
    let mut failure = None;
    for e in 1..=max_epochs {
        match epoch(e) {
            Ok(loss) => {
                losses.push(loss);
                match stopper.observe(loss) {
                    Progress::Improved => on_improve(e),
                    Progress::Stalled => {}
                    Progress::Stop => break,
                }
            }
            Err(err) => {
                failure = Some(err);
                break;
            }
        }
    }
    let summary = EpochSummary {
        epochs_run: losses.len(),
        best_epoch: stopper.best_epoch(),
        best_loss: stopper.best(),
        losses,
    };
    (summary, failure)
}

/// Seeded shuffle of `0..n` into (fit, validation) index lists.
pub fn split_fit_val(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5A11_7000_0001);
    idx.shuffle(&mut rng);
    let val_n = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let fit = idx.split_off(val_n);
    (fit, idx)
}

/// Mean loss over `examples`, evaluated in chunks.
pub fn mean_loss(
    model: &ProbeModel,
    provider: &dyn EmbeddingProvider,
    examples: &[&Example],
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let batch = Batch::build(&model.config, provider, chunk)?;
        total += model.loss(&batch)? * chunk.len() as f64;
    }
    let loss = total / examples.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("validation loss".into()));
    }
    Ok(loss)
}

/// Task metric of `model` over `examples`.
pub fn evaluate_metric(
    model: &ProbeModel,
    provider: &dyn EmbeddingProvider,
    examples: &[&Example],
) -> Result<f64> {
    let kind = model.config.task.metric();
    let mut preds = Vec::new();
    let mut pred_labels = Vec::new();
    for chunk in examples.chunks(EVAL_CHUNK) {
        let batch = Batch::build(&model.config, provider, chunk)?;
        let out = model.predict(&batch)?;
        match kind {
            MetricKind::Accuracy => {
                pred_labels.extend(out.rows().into_iter().map(|r| argmax(r.as_slice().unwrap())))
            }
            _ => preds.extend(out.iter().copied()),
        }
    }
    metric_from_outputs(kind, examples, &preds, &pred_labels)
}

fn metric_from_outputs(
    kind: MetricKind,
    examples: &[&Example],
    preds: &[f64],
    pred_labels: &[usize],
) -> Result<f64> {
    match kind {
        MetricKind::Accuracy => {
            let labels: Vec<usize> = examples.iter().map(|e| e.label.unwrap_or(usize::MAX)).collect();
            accuracy(pred_labels, &labels)
        }
        // Range outputs are pooled: both endpoints count as separate pairs.
        MetricKind::Rmse | MetricKind::LogRmse => {
            let targets: Vec<f64> = examples.iter().flat_map(|e| e.targets.iter().copied()).collect();
            rmse(preds, &targets)
        }
    }
}

/// Metric of the all-zero predictor (class 0 for classification).
pub fn predict_zero_metric(kind: MetricKind, examples: &[&Example]) -> Result<f64> {
    let width = examples.first().map(|e| e.targets.len()).unwrap_or(0);
    let zeros = vec![0.0; examples.len() * width];
    let labels = vec![0usize; examples.len()];
    metric_from_outputs(kind, examples, &zeros, &labels)
}

/// Trains a probe and reports its test metric.
pub fn train_probe(
    dataset: &Dataset,
    provider: &dyn EmbeddingProvider,
    probe_config: &ProbeConfig,
    config: &TrainConfig,
) -> Result<RunResult> {
    Ok(train_probe_with_model(dataset, provider, probe_config, config)?.0)
}

/// As [`train_probe`], also returning the model restored to its best epoch.
pub fn train_probe_with_model(
    dataset: &Dataset,
    provider: &dyn EmbeddingProvider,
    probe_config: &ProbeConfig,
    config: &TrainConfig,
) -> Result<(RunResult, ProbeModel)> {
    let start = Instant::now();
    config.validate(dataset.train.len())?;
    if probe_config.task != dataset.task {
        return Err(Error::Config(format!(
            "probe built for {} but dataset is {}",
            probe_config.task, dataset.task
        )));
    }
    let (fit_idx, val_idx) = split_fit_val(dataset.train.len(), config.val_fraction, config.seed);
    let fit: Vec<&Example> = fit_idx.iter().map(|&i| &dataset.train[i]).collect();
    let val: Vec<&Example> = val_idx.iter().map(|&i| &dataset.train[i]).collect();

    let mut model = build_probe(probe_config, config.seed ^ 0x1417_0000_0000_0001)?;
    let mut best = model.snapshot();
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xBA7C_0000_0000_0001);

    let (summary, failure) = {
        let model_cell = std::cell::RefCell::new(&mut model);
        drive_epochs(
            config.max_epochs,
            config.patience,
            |_epoch| {
                let mut m = model_cell.borrow_mut();
                order.shuffle(&mut rng);
                for chunk in order.chunks(config.batch_size) {
                    let exs: Vec<&Example> = chunk.iter().map(|&i| fit[i]).collect();
                    let batch = Batch::build(&m.config, provider, &exs)?;
                    let loss = m.loss_and_backward(batch)?;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite("training loss".into()));
                    }
                    sgd_step(&mut m.params_mut(), config.lr, config.momentum, config.clip_norm)?;
                }
                mean_loss(&m, provider, &val)
            },
            |_epoch| best = model_cell.borrow().snapshot(),
        )
    };

    let diverged = match failure {
        None => false,
        Some(Error::NonFinite(_)) => true,
        Some(other) => return Err(other),
    };
    model.restore(&best);

    // The test split is read only from here on.
    let test: Vec<&Example> = dataset.test.iter().collect();
    let kind = probe_config.task.metric();
    let test_metric = if diverged {
        predict_zero_metric(kind, &test)?
    } else {
        evaluate_metric(&model, provider, &test)?
    };
    let result = RunResult {
        best_epoch: summary.best_epoch,
        epochs_run: summary.epochs_run,
        best_val_loss: summary.best_loss,
        metric: kind,
        test_metric,
        val_losses: summary.losses,
        diverged,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((result, model))
}

/// One evaluated grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lr: f64,
    pub momentum: f64,
    pub result: RunResult,
}

impl GridCell {
    /// Best validation loss, or `None` for diverged cells.
    pub fn score(&self) -> Option<f64> {
        if self.result.diverged {
            None
        } else {
            self.result.best_val_loss
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub cells: Vec<GridCell>,
    pub best: TrainConfig,
}

/// Index of the cell with the lowest score; ties go to the smaller learning
/// rate, then the smaller momentum. Cells scored `None` are skipped.
pub fn select_best(cells: &[(f64, f64, Option<f64>)]) -> Option<usize> {
    cells
        .iter()
        .enumerate()
        .filter_map(|(i, (lr, m, s))| s.map(|s| (i, *lr, *m, s)))
        .min_by(|a, b| {
            a.3.total_cmp(&b.3)
                .then(a.1.total_cmp(&b.1))
                .then(a.2.total_cmp(&b.2))
        })
        .map(|(i, ..)| i)
}

/// Trains one run per (lr, momentum) cell with `base` otherwise unchanged
/// and returns the cell with the lowest best validation loss. Cells run in
/// parallel on the current rayon pool; results keep grid order.
pub fn grid_search(
    dataset: &Dataset,
    provider: &dyn EmbeddingProvider,
    probe_config: &ProbeConfig,
    base: &TrainConfig,
    lr_grid: &[f64],
    momentum_grid: &[f64],
) -> Result<GridOutcome> {
    if lr_grid.is_empty() || momentum_grid.is_empty() {
        return Err(Error::Config("grid search needs non-empty grids".into()));
    }
    let pairs: Vec<(f64, f64)> = lr_grid
        .iter()
        .flat_map(|&lr| momentum_grid.iter().map(move |&m| (lr, m)))
        .collect();
    for (lr, m) in &pairs {
        base.clone().with_lr(*lr, *m).validate(dataset.train.len())?;
    }
    let cells = pairs
        .par_iter()
        .map(|&(lr, momentum)| {
            let cfg = base.clone().with_lr(lr, momentum);
            train_probe(dataset, provider, probe_config, &cfg).map(|result| GridCell {
                lr,
                momentum,
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<(f64, f64, Option<f64>)> =
        cells.iter().map(|c| (c.lr, c.momentum, c.score())).collect();
    match select_best(&scored) {
        Some(i) => {
            let best = base.clone().with_lr(cells[i].lr, cells[i].momentum);
            Ok(GridOutcome { cells, best })
        }
        None => Err(Error::GridDiverged(
            pairs
                .iter()
                .map(|(lr, m)| format!("lr={lr:e}/momentum={m}"))
                .collect::<Vec<_>>()
                .join(", "),
        )),
    }
}
