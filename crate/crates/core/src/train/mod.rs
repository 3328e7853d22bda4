//! Minibatch training, cross-validation and evaluation metrics.

mod cv;
mod metrics;

pub use cv::{
    cross_validate, prepare_fold, run_fold, CvConfig, CvOutcome, FoldData, FoldMetrics, FoldRun, MetricReport,
};
pub use metrics::{auroc, average_precision, evaluate, macro_recall_f1, summarize, Metrics, Summary};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CoOccurrenceMatrix, EncodedPatient};
use crate::error::{config_err, input_err, Result};
use crate::head::{forward, loss_and_grads, DeepJ, LossWeights, Mode};
use crate::numerics::{AdamState, GradBuffer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub mode: Mode,
    pub weights: LossWeights,
    /// Share of each training fold held out for early stopping.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            patience: 5,
            seed: 0,
            mode: Mode::Full,
            weights: LossWeights::default(),
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config_err!("validation fraction must lie in [0, 1)"));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's training patients.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auprc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch (the last epoch without validation data).
    pub model: DeepJ,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Positive-class probabilities for every patient, in order.
pub fn predict_probs(model: &DeepJ, patients: &[EncodedPatient], co: &CoOccurrenceMatrix, mode: Mode) -> Result<Vec<f64>> {
    let w = LossWeights::default();
    patients.par_iter().map(|p| forward(model, p, co, mode, &w).map(|(pred, _)| pred.prob_positive)).collect()
}

fn batch_gradient(
    model: &DeepJ,
    batch: &[&EncodedPatient],
    co: &CoOccurrenceMatrix,
    mode: Mode,
    weights: &LossWeights,
) -> Result<(f64, GradBuffer)> {
    let parts: Vec<_> =
        batch.par_iter().map(|p| loss_and_grads(model, p, co, mode, weights)).collect::<Result<_>>()?;
    // ordered reduction keeps results independent of scheduling
    let mut total = GradBuffer::zeros_like(&model.params);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l.total;
        total.add(g);
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((loss, total))
}

fn validation(model: &DeepJ, val: &[EncodedPatient], co: &CoOccurrenceMatrix, cfg: &TrainConfig) -> Result<(f64, f64, Option<f64>)> {
    let results: Vec<_> =
        val.par_iter().map(|p| forward(model, p, co, cfg.mode, &cfg.weights)).collect::<Result<_>>()?;
    let loss = results.iter().map(|(_, l)| l.total).sum::<f64>() / val.len() as f64;
    let probs: Vec<f64> = results.iter().map(|(p, _)| p.prob_positive).collect();
    let labels: Vec<u8> = val.iter().map(|p| p.label).collect();
    let auprc = average_precision(&probs, &labels).ok();
    // higher is better; fall back to the loss when AUPRC is undefined
    let score = auprc.unwrap_or(-loss);
    Ok((score, loss, auprc))
}

/// Trains `model` with minibatch Adam, keeping the best validation epoch.
pub fn train_fold(
    train: &[EncodedPatient],
    val: &[EncodedPatient],
    mut model: DeepJ,
    cfg: &TrainConfig,
    co: &CoOccurrenceMatrix,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(input_err!("empty training split"));
    }
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, DeepJ)> = None;
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EncodedPatient> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradient(&model, &batch, co, cfg.mode, &cfg.weights)?;
            if !loss.is_finite() {
                return Err(input_err!("non-finite training loss at epoch {epoch}"));
            }
            epoch_loss += loss;
            adam.step(&mut model.params, &grads)?;
        }
        let mut record =
            EpochRecord { epoch, train_loss: epoch_loss / train.len() as f64, val_loss: None, val_auprc: None };
        if val.is_empty() {
            history.push(record);
            continue;
        }
        let (score, val_loss, auprc) = validation(&model, val, co, cfg)?;
        record.val_loss = Some(val_loss);
        record.val_auprc = auprc;
        history.push(record);
        match &best {
            Some((b, _, _)) if score <= *b => {
                stale += 1;
                if stale >= cfg.patience.max(1) {
                    break;
                }
            }
            _ => {
                best = Some((score, epoch, model.clone()));
                stale = 0;
            }
        }
    }
    Ok(match best {
        Some((_, best_epoch, model)) => TrainOutcome { model, history, best_epoch },
        None => TrainOutcome { best_epoch: history.len() - 1, model, history },
    })
}
