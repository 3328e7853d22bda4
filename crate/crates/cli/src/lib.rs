//! `deepj` subcommands: corpus generation, cross-validated training,
//! per-patient explanations and population statistics.

pub mod config;
pub mod error;
pub mod manifest;

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use deepj_core::corpus::{
    encode_patient, generate_synthetic_corpus, kfold_split, read_corpus, write_corpus, EncodedPatient, PatientRecord,
    Vocabulary,
};
use deepj_core::head::{forward, Checkpoint, DeepJ, LossWeights, Mode};
use deepj_core::interpret::{co_cluster_statistics, edge_statistics, export_graph, extract_patient_graph, ExportFormat};
use deepj_core::train::{cross_validate, run_fold, CvConfig, CvOutcome, FoldMetrics, MetricReport};
use serde_json::json;

use config::{set, FileConfig};
use error::{CliError, Result};
use manifest::{read_text, Artifact, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "deepj", version, about = "Clinical module discovery over encounter sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with planted modules.
    Gen(GenArgs),
    /// Train with k-fold cross-validation and write checkpoints and metrics.
    Train(TrainArgs),
    /// Export the learned graph of one patient.
    Explain(ExplainArgs),
    /// Population edge statistics and co-cluster rankings.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory for corpus.jsonl, vocab.json and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub positive_rate: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub modules: Option<usize>,
    #[arg(long)]
    pub codes_per_module: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub p_max: Option<usize>,
    #[arg(long)]
    pub c_max: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// full, no-gsl or no-cmd.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Number of folds (default 10).
    #[arg(long)]
    pub folds: Option<usize>,
    /// Train and evaluate only the first fold.
    #[arg(long)]
    pub single_split: bool,
    #[arg(long)]
    pub lambda_kld: Option<f64>,
    #[arg(long)]
    pub lambda_lp: Option<f64>,
    #[arg(long)]
    pub lambda_ent: Option<f64>,
    /// NLL multiplier for positive patients.
    #[arg(long)]
    pub positive_weight: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Cluster counts per pooling block, e.g. 12,4.
    #[arg(long, value_delimiter = ',')]
    pub clusters: Option<Vec<usize>>,
    #[arg(long)]
    pub p_max: Option<usize>,
    #[arg(long)]
    pub c_max: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub patient: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Minimum edge weight (default 0.1).
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value = "dot", value_parser = parse_format)]
    pub format: ExportFormat,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Also rank the codes most often pooled with this one.
    #[arg(long)]
    pub target_code: Option<String>,
    /// Rows of the co-cluster table (default 5).
    #[arg(long)]
    pub k: Option<usize>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: deepj_core::Error| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<ExportFormat, String> {
    s.parse().map_err(|e: deepj_core::Error| e.to_string())
}

pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Explain(a) => cmd_explain(&a),
        Command::Stats(a) => cmd_stats(&a),
    }
}

fn ms(start: Instant) -> u128 {
    start.elapsed().as_millis()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<Artifact> {
    fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    Artifact::of(path)
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v).map_err(deepj_core::Error::from)?)
}

fn load_corpus(path: &Path) -> Result<Vec<PatientRecord>> {
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| CliError::io(format!("opening {}", path.display()), e))?;
    let records = read_corpus(file)?;
    if records.is_empty() {
        return Err(CliError::Input(format!("corpus {} has no patients", path.display())));
    }
    Ok(records)
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Ok(Vocabulary::from_json(&read_text(path)?)?)
}

pub fn cmd_gen(a: &GenArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let mut cfg = FileConfig::load(a.config.as_deref())?.gen;
    set(&mut cfg.patients, a.patients);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.positive_rate, a.positive_rate);
    set(&mut cfg.noise_rate, a.noise);
    set(&mut cfg.modules, a.modules);
    set(&mut cfg.codes_per_module, a.codes_per_module);
    set(&mut cfg.vocab_size, a.vocab_size);
    set(&mut cfg.p_max, a.p_max);
    set(&mut cfg.c_max, a.c_max);
    if cfg.patients == 0 {
        return Err(CliError::Config("--patients must be positive".into()));
    }
    let (records, vocab) = generate_synthetic_corpus(&cfg)?;

    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("gen", to_value(&cfg)?);
    manifest.seeds.insert("root".into(), cfg.seed);
    let mut buf = Vec::new();
    write_corpus(&mut buf, &records)?;
    manifest.outputs.push(write_file(&a.out.join("corpus.jsonl"), &buf)?);
    manifest.outputs.push(write_file(&a.out.join("vocab.json"), vocab.to_json()?.as_bytes())?);
    manifest.timings_ms.insert("total".into(), ms(start));
    let positives = records.iter().filter(|r| r.label == 1).count();
    println!("generated {} patients ({positives} positive), {} codes", records.len(), vocab.len() - 1);
    manifest.write(&a.out)
}

fn resolve_train(a: &TrainArgs) -> Result<FileConfig> {
    let mut cfg = FileConfig::load(a.config.as_deref())?;
    let (m, t) = (&mut cfg.model, &mut cfg.train);
    set(&mut m.d_model, a.d_model);
    set(&mut m.n_blocks, a.blocks);
    set(&mut m.clusters, a.clusters.clone());
    set(&mut m.p_max, a.p_max);
    set(&mut m.c_max, a.c_max);
    set(&mut t.mode, a.mode);
    set(&mut t.weights.kld, a.lambda_kld);
    set(&mut t.weights.lp, a.lambda_lp);
    set(&mut t.weights.ent, a.lambda_ent);
    set(&mut t.weights.positive_weight, a.positive_weight);
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.lr, a.lr);
    set(&mut t.patience, a.patience);
    set(&mut t.val_fraction, a.val_fraction);
    set(&mut t.seed, a.seed);
    set(&mut cfg.cv.folds, a.folds);
    cfg.cv.single_split |= a.single_split;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let cfg = resolve_train(a)?;
    let records = load_corpus(&a.corpus)?;
    let vocab = load_vocab(&a.vocab)?;
    let cv = CvConfig { model: cfg.model.to_model_config(vocab.len()), train: cfg.train.clone(), folds: cfg.cv.folds };
    cv.model.validate()?;
    cv.train.validate()?;
    let mut manifest =
        RunManifest::new("train", json!({ "model": cfg.model, "train": cfg.train, "cv": cfg.cv }));
    manifest.seeds.insert("root".into(), cfg.train.seed);
    manifest.inputs.push(Artifact::of(&a.corpus)?);
    manifest.inputs.push(Artifact::of(&a.vocab)?);
    manifest.timings_ms.insert("load".into(), ms(start));

    let started = Instant::now();
    let outcome = if cfg.cv.single_split {
        if cv.folds < 2 {
            return Err(CliError::Config(format!("need at least 2 folds, got {}", cv.folds)));
        }
        let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
        let fold = &kfold_split(&labels, cv.folds, cv.train.seed)?[0];
        let run = run_fold(&records, &vocab, fold, 0, &cv)?;
        let folds = vec![FoldMetrics { fold: 0, metrics: run.metrics }];
        let report = MetricReport::from_folds(cv.train.mode, cv.train.seed, folds)?;
        CvOutcome { report, runs: vec![run] }
    } else {
        cross_validate(&records, &vocab, &cv)?
    };
    manifest.timings_ms.insert("train".into(), ms(started));

    create_dir(&a.out)?;
    let report = &outcome.report;
    manifest.outputs.push(write_file(&a.out.join("metrics.json"), report.to_json()?.as_bytes())?);
    manifest.outputs.push(write_file(&a.out.join("metrics.csv"), report.to_csv().as_bytes())?);
    let labels: std::collections::HashMap<&str, u8> = records.iter().map(|r| (r.id.as_str(), r.label)).collect();
    let mut preds = String::from("fold,patient_id,label,prob_positive\n");
    for run in &outcome.runs {
        for (id, p) in run.test_ids.iter().zip(&run.test_probs) {
            preds.push_str(&format!("{},{id},{},{p}\n", run.fold, labels[id.as_str()]));
        }
        let path = a.out.join(format!("fold{}.ckpt.json", run.fold));
        Checkpoint::new(&run.model, cv.train.mode, &vocab, &run.co)?.save(&path)?;
        manifest.outputs.push(Artifact::of(&path)?);
    }
    manifest.outputs.push(write_file(&a.out.join("predictions.csv"), preds.as_bytes())?);
    manifest.timings_ms.insert("total".into(), ms(start));
    println!(
        "{} over {} fold(s): auroc {:.4} [{:.4}, {:.4}], auprc {:.4}, recall {:.4}, f1 {:.4}",
        report.mode.as_str(),
        report.folds.len(),
        report.auroc.mean,
        report.auroc.ci_low,
        report.auroc.ci_high,
        report.auprc.mean,
        report.recall.mean,
        report.f1.mean
    );
    manifest.write(&a.out)
}

struct Loaded {
    model: DeepJ,
    checkpoint: Checkpoint,
    vocab: Vocabulary,
    records: Vec<PatientRecord>,
}

fn load_trained(checkpoint: &Path, corpus: &Path, vocab: &Path) -> Result<Loaded> {
    if !checkpoint.exists() {
        return Err(CliError::MissingInput(checkpoint.to_path_buf()));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let vocab = load_vocab(vocab)?;
    ck.verify_vocab(&vocab)?;
    let records = load_corpus(corpus)?;
    Ok(Loaded { model: ck.model()?, checkpoint: ck, vocab, records })
}

fn encode_all(l: &Loaded) -> Result<Vec<EncodedPatient>> {
    let g = &l.model.config.gsl;
    Ok(l.records.iter().map(|r| encode_patient(r, g.p_max, g.c_max, &l.vocab)).collect::<deepj_core::Result<_>>()?)
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn cmd_explain(a: &ExplainArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let mut threshold = FileConfig::load(a.config.as_deref())?.interpret.threshold;
    set(&mut threshold, a.threshold);
    let l = load_trained(&a.checkpoint, &a.corpus, &a.vocab)?;
    let record = l
        .records
        .iter()
        .find(|r| r.id == a.patient)
        .ok_or_else(|| CliError::Input(format!("patient {:?} not in corpus", a.patient)))?;
    let g = &l.model.config.gsl;
    let enc = encode_patient(record, g.p_max, g.c_max, &l.vocab)?;
    let (pred, _) = forward(&l.model, &enc, &l.checkpoint.co, Mode::Full, &LossWeights::default())?;
    let expl = extract_patient_graph(&pred, &enc, &l.vocab, threshold)?;
    let bytes = export_graph(&expl, a.format)?;

    create_dir(&a.out)?;
    let ext = match a.format {
        ExportFormat::Dot => "dot",
        ExportFormat::Json => "json",
    };
    let mut manifest =
        RunManifest::new("explain", json!({ "patient": a.patient, "threshold": threshold, "format": ext }));
    manifest.inputs.push(Artifact::of(&a.checkpoint)?);
    manifest.inputs.push(Artifact::of(&a.corpus)?);
    manifest.inputs.push(Artifact::of(&a.vocab)?);
    let path = a.out.join(format!("{}.{ext}", file_stem(&a.patient)));
    manifest.outputs.push(write_file(&path, &bytes)?);
    manifest.timings_ms.insert("total".into(), ms(start));
    println!(
        "patient {}: p(positive) {:.4}, {} nodes, {} edges -> {}",
        a.patient,
        expl.prob_positive,
        expl.nodes.len(),
        expl.edges.len(),
        path.display()
    );
    manifest.write(&a.out)
}

pub fn cmd_stats(a: &StatsArgs) -> Result<PathBuf> {
    let start = Instant::now();
    let mut section = FileConfig::load(a.config.as_deref())?.interpret;
    set(&mut section.threshold, a.threshold);
    set(&mut section.k, a.k);
    let l = load_trained(&a.checkpoint, &a.corpus, &a.vocab)?;
    let encoded = encode_all(&l)?;
    let stats = edge_statistics(&encoded, &l.model, &l.checkpoint.co, &l.vocab, l.checkpoint.mode, section.threshold)?;
    let co_cluster = a
        .target_code
        .as_deref()
        .map(|code| co_cluster_statistics(&encoded, &l.model, &l.checkpoint.co, &l.vocab, code, section.k))
        .transpose()?;

    create_dir(&a.out)?;
    let mut manifest = RunManifest::new(
        "stats",
        json!({ "threshold": section.threshold, "k": section.k, "target_code": a.target_code, "mode": l.checkpoint.mode }),
    );
    manifest.inputs.push(Artifact::of(&a.checkpoint)?);
    manifest.inputs.push(Artifact::of(&a.corpus)?);
    manifest.inputs.push(Artifact::of(&a.vocab)?);
    manifest.outputs.push(write_file(&a.out.join("edge_stats.csv"), stats.to_csv().as_bytes())?);
    if let Some(rows) = &co_cluster {
        let mut csv = String::from("rank,code,patients\n");
        for (i, (code, n)) in rows.iter().enumerate() {
            csv.push_str(&format!("{},{code},{n}\n", i + 1));
        }
        manifest.outputs.push(write_file(&a.out.join("co_cluster.csv"), csv.as_bytes())?);
    }
    manifest.timings_ms.insert("total".into(), ms(start));
    println!("{} edge rows over {} patients", stats.rows.len(), encoded.len());
    manifest.write(&a.out)
}
