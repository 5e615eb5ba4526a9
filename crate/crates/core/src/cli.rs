//! Command-line front end: `gen-data`, `inject-noise`, `train`, `eval` and
//! `detect-report`.
//!
//! Experiment files are flat `key = value` text. Keys are the
//! [`TrainConfig`] field names plus the data paths `train_pairs`,
//! `train_collection`, `dev_pairs`, `dev_collection` and `out_dir`; relative
//! paths resolve against the file's directory and unknown keys are rejected.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::{self, generate_synthetic, inject_noise, Dataset, NoiseSpec, SyntheticConfig};
use crate::detection::{compute_perplexities, detect, detection_report, DetectionReport};
use crate::encoder::{write_atomic, Checkpoint};
use crate::error::{NpcError, Result};
use crate::evaluation::{export_ppl_histogram, retrieve, MetricsReport};
use crate::training::{
    detection_gmm_options, hard_negative_perplexities, mine_hard_negatives, run, GmmSummary,
    Method, Negatives, RunSink, TrainConfig, TrainingData,
};

#[derive(Debug, Parser)]
#[command(name = "npc", version, about = "Noise-robust dense retrieval lab")]
pub struct Cli {
    /// Experiment file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic topic corpus.
    GenData(GenDataArgs),
    /// Replace a fraction of positives with unrelated documents.
    InjectNoise(InjectArgs),
    /// Train a baseline or noise-corrected retriever.
    Train(TrainArgs),
    /// Retrieval metrics of a checkpoint.
    Eval(EvalArgs),
    /// Perplexity histogram and detection quality of a checkpoint.
    DetectReport(DetectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub topics: usize,
    #[arg(long)]
    pub pairs_per_topic: usize,
    #[arg(long, default_value_t = 500)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 16)]
    pub tokens_per_text: usize,
    /// Also write a held-out split generated from `seed + 1`.
    #[arg(long, default_value_t = 0)]
    pub dev_pairs_per_topic: usize,
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub collection: Option<PathBuf>,
    #[arg(long)]
    pub ratio: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub negatives: Option<NegativesArg>,
    #[arg(long)]
    pub hard_k: Option<usize>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub collection: Option<PathBuf>,
    #[arg(long)]
    pub dev_pairs: Option<PathBuf>,
    #[arg(long)]
    pub dev_collection: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub collection: Option<PathBuf>,
    /// Retrieval depth; MRR counts nothing beyond it.
    #[arg(long, default_value_t = 100)]
    pub top_k: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 20])]
    pub recall_at: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub collection: Option<PathBuf>,
    /// Negatives used in the perplexity; `hard` exists for ablation only.
    #[arg(long, value_enum, default_value_t = NegativesArg::InBatch)]
    pub negatives_for_ppl: NegativesArg,
    #[arg(long)]
    pub hard_k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub epoch: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Baseline,
    Npc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NegativesArg {
    InBatch,
    Hard,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Baseline => Method::Baseline,
            MethodArg::Npc => Method::Npc,
        }
    }
}

impl From<NegativesArg> for Negatives {
    fn from(n: NegativesArg) -> Self {
        match n {
            NegativesArg::InBatch => Negatives::InBatch,
            NegativesArg::Hard => Negatives::Hard,
        }
    }
}

/// A parsed experiment file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub train_pairs: Option<PathBuf>,
    pub train_collection: Option<PathBuf>,
    pub dev_pairs: Option<PathBuf>,
    pub dev_collection: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

const PATH_KEYS: [&str; 5] = [
    "train_pairs",
    "train_collection",
    "dev_pairs",
    "dev_collection",
    "out_dir",
];

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment. Values that parse as
    /// JSON scalars are taken as such, anything else as a string.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut fields = serde_json::Map::new();
        let mut paths: BTreeMap<&str, PathBuf> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| NpcError::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(&k) = PATH_KEYS.iter().find(|&&k| k == key) {
                paths.insert(k, base_dir.join(value));
                continue;
            }
            if fields.contains_key(key) {
                return Err(NpcError::config(format!(
                    "line {}: duplicate key {key:?}",
                    i + 1
                )));
            }
            let v = serde_json::from_str::<serde_json::Value>(value)
                .ok()
                .filter(|v| !v.is_object() && !v.is_array())
                .unwrap_or_else(|| serde_json::Value::String(value.to_string()));
            fields.insert(key.to_string(), v);
        }
        let train: TrainConfig = serde_json::from_value(serde_json::Value::Object(fields))
            .map_err(|e| NpcError::config(e.to_string()))?;
        let mut take = |k: &str| paths.remove(k);
        Ok(ExperimentConfig {
            train,
            train_pairs: take("train_pairs"),
            train_collection: take("train_collection"),
            dev_pairs: take("dev_pairs"),
            dev_collection: take("dev_collection"),
            out_dir: take("out_dir"),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let exp = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let seed = cli.seed.unwrap_or(exp.train.seed);
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| exp.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    match &cli.command {
        Command::GenData(a) => gen_data(a, seed, &out_dir),
        Command::InjectNoise(a) => inject(a, seed, &out_dir),
        Command::Train(a) => train(a, exp, seed, &out_dir),
        Command::Eval(a) => eval(a, &out_dir),
        Command::DetectReport(a) => detect_report(a, &exp.train, seed, &out_dir),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn gen_data(a: &GenDataArgs, seed: u64, out: &Path) -> Result<()> {
    let cfg = SyntheticConfig::new(
        a.topics,
        a.pairs_per_topic,
        a.vocab_size,
        a.tokens_per_text,
        seed,
    );
    let ds = generate_synthetic(&cfg)?;
    data::write_pairs(&out.join("pairs.jsonl"), &ds.pairs)?;
    data::write_collection(&out.join("collection.jsonl"), &ds.collection)?;
    if a.dev_pairs_per_topic > 0 {
        let dev = generate_synthetic(&SyntheticConfig {
            pairs_per_topic: a.dev_pairs_per_topic,
            seed: seed.wrapping_add(1),
            ..cfg
        })?;
        data::write_pairs(&out.join("dev_pairs.jsonl"), &dev.pairs)?;
        data::write_collection(&out.join("dev_collection.jsonl"), &dev.collection)?;
    }
    Ok(())
}

fn inject(a: &InjectArgs, seed: u64, out: &Path) -> Result<()> {
    let ds = data::load_dataset(&a.pairs, a.collection.as_deref())?;
    let noisy = inject_noise(
        &ds.pairs,
        &NoiseSpec {
            ratio: a.ratio,
            seed,
        },
    )?;
    data::write_pairs(&out.join("pairs.jsonl"), &noisy)?;
    data::write_collection(&out.join("collection.jsonl"), &ds.collection)
}

fn train(a: &TrainArgs, exp: ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    let mut cfg = exp.train;
    cfg.seed = seed;
    if let Some(m) = a.method {
        cfg.method = m.into();
    }
    if let Some(n) = a.negatives {
        cfg.negatives = n.into();
    }
    if let Some(k) = a.hard_k {
        cfg.hard_negatives_per_query = k;
    }
    cfg.validate()?;
    let pairs =
        a.pairs.clone().or(exp.train_pairs).ok_or_else(|| {
            NpcError::config("no training pairs: pass --pairs or set train_pairs")
        })?;
    let train_ds = data::load_dataset(
        &pairs,
        a.collection.as_deref().or(exp.train_collection.as_deref()),
    )?;
    let dev_ds: Option<Dataset> = match a.dev_pairs.clone().or(exp.dev_pairs) {
        Some(p) => Some(data::load_dataset(
            &p,
            a.dev_collection
                .as_deref()
                .or(exp.dev_collection.as_deref()),
        )?),
        None => None,
    };
    write_json(&out.join("config.json"), &cfg)?;
    run(
        &cfg,
        &train_ds,
        dev_ds.as_ref(),
        Some(&RunSink {
            out_dir: out.to_path_buf(),
        }),
    )?;
    Ok(())
}

fn eval(a: &EvalArgs, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = data::load_dataset(&a.pairs, a.collection.as_deref())?;
    let vocab = ckpt.vocabulary();
    let queries: Vec<(String, String)> = ds
        .pairs
        .iter()
        .map(|p| (p.query_id.clone(), p.query_text.clone()))
        .collect();
    let run = retrieve(
        &ckpt.params,
        &vocab,
        &queries,
        &ds.collection,
        a.top_k,
        ckpt.similarity,
    )?;
    let report = MetricsReport::compute(&run, &ds.gold(), &a.recall_at)?;
    let mut tsv = String::from("query_id\trank\tdoc_id\tscore\n");
    for (qid, list) in &run.results {
        for (r, (doc, score)) in list.iter().enumerate() {
            tsv.push_str(&format!("{qid}\t{}\t{doc}\t{score}\n", r + 1));
        }
    }
    write_atomic(&out.join("run.tsv"), tsv.as_bytes())?;
    write_json(&out.join("metrics.json"), &report)
}

#[derive(Debug, Serialize)]
struct DetectOutput {
    negatives_for_ppl: Negatives,
    pairs: usize,
    clean: usize,
    noisy: usize,
    gmm: Option<GmmSummary>,
    detection: Option<DetectionReport>,
}

fn detect_report(a: &DetectArgs, base: &TrainConfig, seed: u64, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = data::load_dataset(&a.pairs, a.collection.as_deref())?;
    let data = TrainingData::with_vocab(&ds, ckpt.vocabulary())?;
    let cfg = TrainConfig {
        similarity: ckpt.similarity,
        seed,
        ..base.clone()
    };
    let ppl_cfg = cfg.perplexity_config();
    let records = match a.negatives_for_ppl {
        NegativesArg::InBatch => {
            compute_perplexities(&ckpt.params, &data.pairs, &ppl_cfg, a.epoch)?
        }
        NegativesArg::Hard => {
            let k = a.hard_k.unwrap_or(cfg.hard_negatives_per_query).max(1);
            let store = mine_hard_negatives(&ckpt.params, &data, k, cfg.similarity)?;
            hard_negative_perplexities(&ckpt.params, &data, &store, &ppl_cfg, a.epoch)?
        }
    };
    let (fit, flags) = detect(&records, &detection_gmm_options(), cfg.threshold, a.epoch)?;
    let truth: BTreeMap<u64, bool> = ds
        .pairs
        .iter()
        .filter_map(|p| p.truth_clean.map(|t| (p.pair_id, t)))
        .collect();
    export_ppl_histogram(
        &records,
        Some(&flags),
        &truth,
        &out.join("ppl_histogram.csv"),
    )?;
    let detection = if truth.len() == ds.pairs.len() && !ds.pairs.is_empty() {
        Some(detection_report(&flags, &ds.pairs)?)
    } else {
        None
    };
    write_json(
        &out.join("detection_report.json"),
        &DetectOutput {
            negatives_for_ppl: a.negatives_for_ppl.into(),
            pairs: records.len(),
            clean: flags.clean_count(),
            noisy: flags.noisy_count(),
            gmm: fit.as_ref().map(GmmSummary::from),
            detection,
        },
    )
}
