use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, summarize, Metrics, Summary};
use super::{predict_probs, train_fold, EpochRecord, TrainConfig};
use crate::corpus::{encode_patient, estimate_co_occurrence, kfold_split, stratified_holdout, CoOccurrenceMatrix};
use crate::corpus::{EncodedPatient, Fold, PatientRecord, Vocabulary};
use crate::error::{config_err, input_err, Result};
use crate::head::{DeepJ, Mode, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    /// Template; `gsl.t_max` is replaced per fold from the training split.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
}

/// Encoded splits of one fold plus the statistics estimated on its training part.
#[derive(Clone, Debug)]
pub struct FoldData {
    pub train: Vec<EncodedPatient>,
    pub val: Vec<EncodedPatient>,
    pub test: Vec<EncodedPatient>,
    pub co: CoOccurrenceMatrix,
    pub t_max: f64,
}

fn stream_seed(root: u64, stream: u64, index: u64) -> u64 {
    root.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ index.wrapping_add(1)
}

/// Splits the fold's training records into inner train and validation parts
/// and estimates the co-occurrence matrix and `t_max` from the inner train part.
pub fn prepare_fold(
    records: &[PatientRecord],
    vocab: &Vocabulary,
    fold: &Fold,
    fold_index: usize,
    cfg: &CvConfig,
) -> Result<FoldData> {
    if fold.train.is_empty() || fold.test.is_empty() {
        return Err(input_err!("fold {fold_index} has an empty split"));
    }
    let labels: Vec<u8> = fold.train.iter().map(|&i| records[i].label).collect();
    let (inner, held) =
        stratified_holdout(&labels, cfg.train.val_fraction, stream_seed(cfg.train.seed, 1, fold_index as u64));
    let pick = |idx: &[usize]| -> Vec<&PatientRecord> { idx.iter().map(|&i| &records[fold.train[i]]).collect() };
    let train_records: Vec<PatientRecord> = pick(&inner).into_iter().cloned().collect();
    let co = estimate_co_occurrence(&train_records, vocab)?;
    let (p_max, c_max) = (cfg.model.gsl.p_max, cfg.model.gsl.c_max);
    let encode = |rs: &[&PatientRecord]| -> Result<Vec<EncodedPatient>> {
        rs.iter().map(|r| encode_patient(r, p_max, c_max, vocab)).collect()
    };
    let train = encode(&train_records.iter().collect::<Vec<_>>())?;
    let t_max = train.iter().flat_map(|e| e.time.iter().copied()).fold(0.0, f64::max).max(1.0);
    Ok(FoldData {
        val: encode(&pick(&held))?,
        test: encode(&fold.test.iter().map(|&i| &records[i]).collect::<Vec<_>>())?,
        train,
        co,
        t_max,
    })
}

#[derive(Clone, Debug)]
pub struct FoldRun {
    pub fold: usize,
    pub model: DeepJ,
    pub co: CoOccurrenceMatrix,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub metrics: Metrics,
    pub test_probs: Vec<f64>,
    pub test_ids: Vec<String>,
}

/// Trains and evaluates a single fold.
pub fn run_fold(
    records: &[PatientRecord],
    vocab: &Vocabulary,
    fold: &Fold,
    fold_index: usize,
    cfg: &CvConfig,
) -> Result<FoldRun> {
    let data = prepare_fold(records, vocab, fold, fold_index, cfg)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.gsl.t_max = data.t_max;
    model_cfg.vocab_size = vocab.len();
    let model = DeepJ::new(model_cfg, stream_seed(cfg.train.seed, 2, fold_index as u64))?;
    let train_cfg = TrainConfig { seed: stream_seed(cfg.train.seed, 3, fold_index as u64), ..cfg.train.clone() };
    let outcome = train_fold(&data.train, &data.val, model, &train_cfg, &data.co)?;
    let probs = predict_probs(&outcome.model, &data.test, &data.co, cfg.train.mode)?;
    let labels: Vec<u8> = data.test.iter().map(|p| p.label).collect();
    let metrics = evaluate(&probs, &labels, 0.5)?;
    Ok(FoldRun {
        fold: fold_index,
        model: outcome.model,
        co: data.co,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        metrics,
        test_probs: probs,
        test_ids: data.test.into_iter().map(|p| p.id).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: Mode,
    pub seed: u64,
    pub folds: Vec<FoldMetrics>,
    pub recall: Summary,
    pub f1: Summary,
    pub auroc: Summary,
    pub auprc: Summary,
}

impl MetricReport {
    pub fn from_folds(mode: Mode, seed: u64, folds: Vec<FoldMetrics>) -> Result<Self> {
        let col = |f: fn(&Metrics) -> f64| -> Result<Summary> {
            summarize(&folds.iter().map(|m| f(&m.metrics)).collect::<Vec<_>>(), 0.95, 0.0, 1.0)
        };
        Ok(Self {
            mode,
            seed,
            recall: col(|m| m.recall)?,
            f1: col(|m| m.f1)?,
            auroc: col(|m| m.auroc)?,
            auprc: col(|m| m.auprc)?,
            folds,
        })
    }

    /// One row per fold, then `mean`, `ci_low` and `ci_high` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,seed,row,recall,f1,auroc,auprc\n");
        let (mode, seed) = (self.mode.as_str(), self.seed);
        for f in &self.folds {
            let m = &f.metrics;
            let _ = writeln!(out, "{mode},{seed},{},{},{},{},{}", f.fold, m.recall, m.f1, m.auroc, m.auprc);
        }
        let s = [&self.recall, &self.f1, &self.auroc, &self.auprc];
        for (name, get) in [
            ("mean", (|s: &Summary| s.mean) as fn(&Summary) -> f64),
            ("ci_low", |s| s.ci_low),
            ("ci_high", |s| s.ci_high),
        ] {
            let _ = writeln!(out, "{mode},{seed},{name},{},{},{},{}", get(s[0]), get(s[1]), get(s[2]), get(s[3]));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub report: MetricReport,
    pub runs: Vec<FoldRun>,
}

/// Stratified `k`-fold cross-validation. Every fold-level statistic is
/// estimated from that fold's training records only.
pub fn cross_validate(records: &[PatientRecord], vocab: &Vocabulary, cfg: &CvConfig) -> Result<CvOutcome> {
    if cfg.folds < 2 {
        return Err(config_err!("need at least 2 folds, got {}", cfg.folds));
    }
    cfg.train.validate()?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let folds = kfold_split(&labels, cfg.folds, cfg.train.seed)?;
    let runs: Vec<FoldRun> = folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| run_fold(records, vocab, f, i, cfg))
        .collect::<Result<_>>()?;
    let per_fold = runs.iter().map(|r| FoldMetrics { fold: r.fold, metrics: r.metrics }).collect();
    let report = MetricReport::from_folds(cfg.train.mode, cfg.train.seed, per_fold)?;
    Ok(CvOutcome { report, runs })
}
