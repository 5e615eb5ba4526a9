//! Training loop: contrastive warmup, then per epoch detect -> (re-mine hard
//! negatives) -> corrected updates with an EMA teacher.
//!
//! The baseline method runs the same schedule with detection and correction
//! switched off, so the two methods are bit-identical through warmup.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::correction::{ema_update, init_teacher, CandidateSet, KlDirection, TeacherState};
use crate::data::{batches, Dataset};
use crate::detection::{
    self, compute_perplexities, detection_report, DetectionReport, FlagSet, GmmFit, GmmOptions,
    PairTokens, PerplexityConfig, PerplexityRecord,
};
use crate::encoder::{
    batch_distributions, encode_forward, encoded_score, loss_and_gradients, tokenize, write_atomic,
    BatchLoss, Checkpoint, EmaMeta, EncoderParams, GradientAccumulator, LossBatch, LossConfig,
    Side, Vocabulary,
};
use crate::error::{NpcError, Result};
use crate::evaluation::{rank_scores, retrieve, MetricsReport};
use crate::numerics::{log_sum_exp_unchecked, SimilarityKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Npc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Negatives {
    #[serde(alias = "in-batch")]
    InBatch,
    Hard,
}

macro_rules! parse_enum {
    ($ty:ty, $($text:literal => $variant:expr),+ $(,)?) => {
        impl std::str::FromStr for $ty {
            type Err = NpcError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($variant),)+
                    other => Err(NpcError::config(format!(concat!("unknown ", stringify!($ty), " {:?}"), other))),
                }
            }
        }
    };
}

parse_enum!(Method, "baseline" => Method::Baseline, "npc" => Method::Npc);
parse_enum!(
    Negatives,
    "in_batch" => Negatives::InBatch,
    "in-batch" => Negatives::InBatch,
    "hard" => Negatives::Hard,
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Negatives for training batches after warmup.
    pub negatives: Negatives,
    pub temperature: f64,
    pub similarity: SimilarityKind,
    /// Clean-flag threshold on the posterior.
    pub threshold: f64,
    /// EMA momentum.
    pub alpha: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub hard_negatives_per_query: usize,
    pub hidden: usize,
    pub init_scale: f64,
    pub shared_towers: bool,
    pub kl_direction: KlDirection,
    /// Re-run detection every epoch; `false` reuses the first post-warmup flags.
    pub iterative_detection: bool,
    pub remine_hard_negatives: bool,
    /// Defaults to `batch_size`.
    pub detection_batch_size: Option<usize>,
    /// Ablation only: `hard` adds mined negatives to the perplexity.
    pub ppl_negatives: Negatives,
    pub eval_top_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Npc,
            negatives: Negatives::InBatch,
            temperature: 20.0,
            similarity: SimilarityKind::Cosine,
            threshold: 0.5,
            alpha: 0.999,
            batch_size: 64,
            warmup_epochs: 3,
            total_epochs: 15,
            learning_rate: 2e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            hard_negatives_per_query: 1,
            hidden: 64,
            init_scale: 0.1,
            shared_towers: true,
            kl_direction: KlDirection::StudentTeacher,
            iterative_detection: true,
            remine_hard_negatives: true,
            detection_batch_size: None,
            ppl_negatives: Negatives::InBatch,
            eval_top_k: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NpcError::config(m));
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return fail(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.batch_size < 2 || self.detection_batch_size.is_some_and(|b| b < 2) {
            return fail("batch sizes must be >= 2".into());
        }
        if self.method == Method::Npc && self.warmup_epochs >= self.total_epochs {
            return fail(format!(
                "npc needs warmup_epochs < total_epochs ({} >= {})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if self.warmup_epochs > self.total_epochs {
            return fail("warmup_epochs exceeds total_epochs".into());
        }
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || self.grad_clip.is_nan()
            || self.grad_clip <= 0.0
            || self.hidden == 0
        {
            return fail("learning_rate, grad_clip and hidden must be positive".into());
        }
        if self.eval_top_k == 0 {
            return fail("eval_top_k must be >= 1".into());
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            similarity: self.similarity,
            kl_direction: self.kl_direction,
        }
    }

    pub fn perplexity_config(&self) -> PerplexityConfig {
        PerplexityConfig {
            batch_size: self.detection_batch_size.unwrap_or(self.batch_size),
            temperature: self.temperature,
            similarity: self.similarity,
            seed: self.seed,
        }
    }

    /// Short SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).unwrap_or_default();
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// Adam moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams) -> Self {
        OptimizerState {
            first_moment: vec![0.0; params.len()],
            second_moment: vec![0.0; params.len()],
            step: 0,
        }
    }

    pub fn apply(
        &mut self,
        params: &mut EncoderParams,
        grads: &GradientAccumulator,
        cfg: &TrainConfig,
    ) -> Result<()> {
        if grads.values.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(NpcError::contract(
                "optimizer state does not match the parameters",
            ));
        }
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .values
            .iter_mut()
            .zip(&grads.values)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
        }
        Ok(())
    }
}

/// Tokenized training set plus the tokenized collection used for mining.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub vocab: Vocabulary,
    pub pairs: PairTokens,
    pub collection_ids: Vec<String>,
    pub collection_tokens: Vec<Vec<usize>>,
    /// Collection index of each pair's annotated document.
    pub positive_index: Vec<usize>,
}

impl TrainingData {
    /// Builds the vocabulary from the training queries and the collection.
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let vocab = Vocabulary::build(
            dataset
                .pairs
                .iter()
                .map(|p| p.query_text.as_str())
                .chain(dataset.collection.iter().map(|(_, t)| t)),
            1,
        );
        Self::with_vocab(dataset, vocab)
    }

    pub fn with_vocab(dataset: &Dataset, vocab: Vocabulary) -> Result<Self> {
        dataset.validate()?;
        let collection_ids: Vec<String> = dataset
            .collection
            .iter()
            .map(|(id, _)| id.to_string())
            .collect();
        let collection_tokens = dataset
            .collection
            .iter()
            .map(|(_, t)| tokenize(t, &vocab))
            .collect();
        let lookup: BTreeMap<&str, usize> = collection_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let positive_index = dataset
            .pairs
            .iter()
            .map(|p| {
                lookup
                    .get(p.doc_id.as_str())
                    .copied()
                    .ok_or_else(|| NpcError::Integrity(format!("unknown doc_id {:?}", p.doc_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let pairs = PairTokens::new(&dataset.pairs, &vocab);
        Ok(TrainingData {
            vocab,
            pairs,
            collection_ids,
            collection_tokens,
            positive_index,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Mined negatives per pair, as collection indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HardNegativeStore {
    pub negatives: Vec<Vec<usize>>,
}

impl HardNegativeStore {
    pub fn doc_ids<'a>(&self, data: &'a TrainingData, pair: usize) -> Vec<&'a str> {
        self.negatives
            .get(pair)
            .map(|v| v.iter().map(|&i| data.collection_ids[i].as_str()).collect())
            .unwrap_or_default()
    }
}

/// Top-`k` collection documents per query under `params`, excluding the
/// pair's annotated document. Exhaustive scan; ties go to the smaller id.
pub fn mine_hard_negatives(
    params: &EncoderParams,
    data: &TrainingData,
    k: usize,
    kind: SimilarityKind,
) -> Result<HardNegativeStore> {
    if k == 0 {
        return Ok(HardNegativeStore {
            negatives: vec![Vec::new(); data.len()],
        });
    }
    if data.collection_tokens.len() < k + 1 {
        return Err(NpcError::config(format!(
            "collection of {} documents is too small to mine {k} negatives",
            data.collection_tokens.len()
        )));
    }
    let normalize = kind == SimilarityKind::Cosine;
    let docs = data
        .collection_tokens
        .par_iter()
        .map(|t| encode_forward(t, params, Side::Doc, normalize).map(|e| e.out))
        .collect::<Result<Vec<_>>>()?;
    let negatives = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<usize>> {
            let q = encode_forward(&data.pairs.queries[i], params, Side::Query, normalize)?;
            let pos = data.positive_index[i];
            let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
            for (j, d) in docs.iter().enumerate() {
                if j == pos {
                    continue;
                }
                let s = encoded_score(&q.out, d);
                // Collection indices ascend with doc id, so `>` keeps the smaller id on ties.
                if best.len() < k || s > best[best.len() - 1].1 {
                    let at = best.partition_point(|&(_, b)| b >= s);
                    best.insert(at, (j, s));
                    best.truncate(k);
                }
            }
            Ok(best.into_iter().map(|(j, _)| j).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HardNegativeStore { negatives })
}

/// Perplexities with each query's mined negatives added to its in-batch
/// negatives. Only used to ablate the easy-negative requirement of the
/// detector.
pub fn hard_negative_perplexities(
    params: &EncoderParams,
    data: &TrainingData,
    store: &HardNegativeStore,
    cfg: &PerplexityConfig,
    epoch: u64,
) -> Result<Vec<PerplexityRecord>> {
    let normalize = cfg.similarity == SimilarityKind::Cosine;
    let in_batch = compute_perplexities(params, &data.pairs, cfg, epoch)?;
    in_batch
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mined = store.negatives.get(i).map(Vec::as_slice).unwrap_or(&[]);
            if mined.is_empty() {
                return Ok(*rec);
            }
            let q = encode_forward(&data.pairs.queries[i], params, Side::Query, normalize)?;
            let pos = encode_forward(&data.pairs.docs[i], params, Side::Doc, normalize)?;
            let pos_logit = cfg.temperature * encoded_score(&q.out, &pos.out);
            // In-batch log-partition recovered from the record: lse = ppl + pos_logit.
            let mut terms = vec![rec.ppl + pos_logit];
            for &j in mined {
                let d = encode_forward(&data.collection_tokens[j], params, Side::Doc, normalize)?;
                terms.push(cfg.temperature * encoded_score(&q.out, &d.out));
            }
            Ok(PerplexityRecord {
                pair_id: rec.pair_id,
                ppl: (log_sum_exp_unchecked(&terms) - pos_logit).max(0.0),
            })
        })
        .collect()
}

/// Pool of distinct documents for a batch (positives first, then mined
/// negatives); every query scores the whole pool.
pub fn assemble_batch(
    data: &TrainingData,
    batch: &[usize],
    store: Option<&HardNegativeStore>,
) -> Result<LossBatch> {
    let mut pool: Vec<usize> = Vec::new();
    let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
    let mut add = |doc: usize, pool: &mut Vec<usize>| -> usize {
        *slot.entry(doc).or_insert_with(|| {
            pool.push(doc);
            pool.len() - 1
        })
    };
    let positives: Vec<usize> = batch
        .iter()
        .map(|&i| add(data.positive_index[i], &mut pool))
        .collect();
    if let Some(store) = store {
        for &i in batch {
            for &j in store.negatives.get(i).map(Vec::as_slice).unwrap_or(&[]) {
                add(j, &mut pool);
            }
        }
    }
    if pool.len() < 2 {
        return Err(NpcError::contract(
            "batch has fewer than 2 distinct documents",
        ));
    }
    let all: Vec<usize> = (0..pool.len()).collect();
    Ok(LossBatch {
        pair_ids: batch.iter().map(|&i| data.pairs.pair_ids[i]).collect(),
        queries: batch
            .iter()
            .map(|&i| data.pairs.queries[i].clone())
            .collect(),
        docs: pool
            .iter()
            .map(|&d| data.collection_tokens[d].clone())
            .collect(),
        candidates: positives
            .into_iter()
            .map(|positive| CandidateSet {
                docs: all.clone(),
                positive,
            })
            .collect(),
    })
}

/// Mutable training state: student, optional teacher, optimizer.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: EncoderParams,
    pub teacher: Option<TeacherState>,
    pub optimizer: OptimizerState,
}

impl TrainerState {
    pub fn new(vocab_size: usize, cfg: &TrainConfig) -> Self {
        let params = EncoderParams::init_uniform(
            vocab_size,
            cfg.hidden,
            cfg.shared_towers,
            cfg.init_scale,
            cfg.seed,
        );
        let optimizer = OptimizerState::new(&params);
        TrainerState {
            params,
            teacher: None,
            optimizer,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub contrastive: f64,
    pub consistency: f64,
    pub batches: usize,
}

/// Salt separating training batch order from the run seed.
const TRAIN_STREAM: u64 = 0x7a1e_0000_0000_0001;

/// One pass over the data. Flags default to all-clean; with a teacher each
/// batch adds the consistency term and ends with an EMA update.
pub fn train_epoch(
    state: &mut TrainerState,
    data: &TrainingData,
    flags: Option<&FlagSet>,
    store: Option<&HardNegativeStore>,
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<EpochLoss> {
    let loss_cfg = cfg.loss_config();
    let mut stats = EpochLoss::default();
    for batch in batches(data.len(), cfg.batch_size, cfg.seed ^ TRAIN_STREAM, epoch)? {
        let lb = assemble_batch(data, &batch, store)?;
        let batch_flags: Vec<bool> = lb
            .pair_ids
            .iter()
            .map(|id| flags.map_or(Some(true), |f| f.is_clean(*id)))
            .collect::<Option<_>>()
            .ok_or_else(|| NpcError::contract("flag set does not cover the batch"))?;
        let targets = match &state.teacher {
            Some(t) => Some(batch_distributions(&lb, &t.params, &loss_cfg)?),
            None => None,
        };
        let (loss, mut grads): (BatchLoss, _) = loss_and_gradients(
            &lb,
            &state.params,
            targets.as_deref(),
            &batch_flags,
            &loss_cfg,
        )?;
        grads.clip_global_norm(cfg.grad_clip);
        state.optimizer.apply(&mut state.params, &grads, cfg)?;
        if let Some(t) = state.teacher.as_mut() {
            ema_update(t, &state.params)?;
        }
        stats.total += loss.total;
        stats.contrastive += loss.contrastive;
        stats.consistency += loss.consistency;
        stats.batches += 1;
    }
    if stats.batches > 0 {
        let n = stats.batches as f64;
        stats.total /= n;
        stats.contrastive /= n;
        stats.consistency /= n;
    }
    Ok(stats)
}

/// Plain contrastive training with in-batch negatives for `warmup_epochs`.
pub fn warmup(
    state: &mut TrainerState,
    data: &TrainingData,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    (0..cfg.warmup_epochs as u64)
        .map(|e| train_epoch(state, data, None, None, cfg, e))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSummary {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub clean_component: usize,
    pub iterations: usize,
    pub degenerate: bool,
}

impl From<&GmmFit> for GmmSummary {
    fn from(f: &GmmFit) -> Self {
        GmmSummary {
            weights: f.weights,
            means: f.means,
            variances: f.variances,
            clean_component: f.clean_component,
            iterations: f.iterations(),
            degenerate: f.degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagSummary {
    /// Epoch whose perplexities produced the flags.
    pub detected_at_epoch: u64,
    pub clean: usize,
    pub noisy: usize,
    pub gmm: Option<GmmSummary>,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub phase: String,
    pub loss: EpochLoss,
    pub optimizer_steps: u64,
    pub ema_steps: Option<u64>,
    pub flags: Option<FlagSummary>,
    pub detection: Option<DetectionReport>,
    pub dev: Option<MetricsReport>,
}

/// Detection state captured at one epoch.
#[derive(Debug, Clone)]
pub struct DetectionSnapshot {
    pub epoch: u64,
    pub records: Vec<PerplexityRecord>,
    pub fit: Option<GmmFit>,
    pub flags: FlagSet,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub vocab: Vocabulary,
    pub params: EncoderParams,
    pub best_params: EncoderParams,
    pub best_epoch: Option<u64>,
    pub teacher: Option<TeacherState>,
    pub metrics: Vec<EpochMetrics>,
    pub detections: Vec<DetectionSnapshot>,
}

impl RunOutput {
    pub fn final_dev(&self) -> Option<&MetricsReport> {
        self.metrics.last().and_then(|m| m.dev.as_ref())
    }
}

/// Dev recall cutoffs logged every epoch.
pub const DEV_RECALL_KS: [usize; 3] = [1, 5, 20];

pub fn dev_metrics(
    params: &EncoderParams,
    vocab: &Vocabulary,
    dev: &Dataset,
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    let queries: Vec<(String, String)> = dev
        .pairs
        .iter()
        .map(|p| (p.query_id.clone(), p.query_text.clone()))
        .collect();
    let k = cfg.eval_top_k.min(dev.collection.len());
    let run = retrieve(params, vocab, &queries, &dev.collection, k, cfg.similarity)?;
    MetricsReport::compute(&run, &dev.gold(), &DEV_RECALL_KS)
}

/// Output files written after every epoch: `checkpoint.json`,
/// `teacher.json` (once a teacher exists), `best.json` (by dev Recall@5)
/// and `metrics.jsonl`. Each is replaced atomically.
#[derive(Debug, Clone)]
pub struct RunSink {
    pub out_dir: PathBuf,
}

impl RunSink {
    fn write_epoch(&self, out: &RunOutput, cfg: &TrainConfig, best_changed: bool) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        let hash = cfg.hash();
        Checkpoint::new(&out.vocab, &out.params, cfg.similarity, hash.clone())
            .save_atomic(&self.out_dir.join("checkpoint.json"))?;
        if let Some(t) = &out.teacher {
            let mut c = Checkpoint::new(&out.vocab, &t.params, cfg.similarity, hash.clone());
            c.ema = Some(EmaMeta {
                alpha: t.alpha,
                step: t.step,
            });
            c.save_atomic(&self.out_dir.join("teacher.json"))?;
        }
        if best_changed {
            Checkpoint::new(&out.vocab, &out.best_params, cfg.similarity, hash)
                .save_atomic(&self.out_dir.join("best.json"))?;
        }
        write_atomic(
            &self.out_dir.join("metrics.jsonl"),
            &metrics_jsonl(&out.metrics)?,
        )
    }
}

pub fn metrics_jsonl(metrics: &[EpochMetrics]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for m in metrics {
        serde_json::to_writer(&mut buf, m)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn write_metrics_log(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    write_atomic(path, &metrics_jsonl(metrics)?)
}

/// The full schedule. `dev` enables per-epoch retrieval metrics and
/// best-checkpoint tracking; `sink` enables per-epoch file output.
pub fn run(
    cfg: &TrainConfig,
    train: &Dataset,
    dev: Option<&Dataset>,
    sink: Option<&RunSink>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let data = TrainingData::new(train)?;
    if data.len() < 2 {
        return Err(NpcError::contract("training needs at least 2 pairs"));
    }
    let has_truth = train.pairs.iter().all(|p| p.truth_clean.is_some());
    let mut state = TrainerState::new(data.vocab.len(), cfg);
    let mut out = RunOutput {
        vocab: data.vocab.clone(),
        params: state.params.clone(),
        best_params: state.params.clone(),
        best_epoch: None,
        teacher: None,
        metrics: Vec::new(),
        detections: Vec::new(),
    };
    let mut best_r5 = f64::NEG_INFINITY;
    let mut fixed_flags: Option<(FlagSet, Option<GmmFit>)> = None;
    let mut store: Option<HardNegativeStore> = None;
    let ppl_cfg = cfg.perplexity_config();

    for epoch in 0..cfg.total_epochs as u64 {
        let in_warmup = epoch < cfg.warmup_epochs as u64;
        let npc_phase = cfg.method == Method::Npc && !in_warmup;
        if npc_phase && state.teacher.is_none() {
            state.teacher = Some(init_teacher(&state.params, cfg.alpha)?);
        }

        if !in_warmup
            && cfg.negatives == Negatives::Hard
            && (store.is_none() || cfg.remine_hard_negatives)
        {
            store = Some(mine_hard_negatives(
                &state.params,
                &data,
                cfg.hard_negatives_per_query,
                cfg.similarity,
            )?);
        }

        let mut flag_summary = None;
        let mut detection = None;
        let flags = if npc_phase {
            let (flags, fit) = match (&fixed_flags, cfg.iterative_detection) {
                (Some(prev), false) => prev.clone(),
                _ => {
                    let records = match cfg.ppl_negatives {
                        Negatives::InBatch => {
                            compute_perplexities(&state.params, &data.pairs, &ppl_cfg, epoch)?
                        }
                        Negatives::Hard => {
                            let mined = mine_hard_negatives(
                                &state.params,
                                &data,
                                cfg.hard_negatives_per_query.max(1),
                                cfg.similarity,
                            )?;
                            hard_negative_perplexities(
                                &state.params,
                                &data,
                                &mined,
                                &ppl_cfg,
                                epoch,
                            )?
                        }
                    };
                    let (fit, flags) = detection::detect(
                        &records,
                        &detection_gmm_options(),
                        cfg.threshold,
                        epoch,
                    )?;
                    out.detections.push(DetectionSnapshot {
                        epoch,
                        records,
                        fit: fit.clone(),
                        flags: flags.clone(),
                    });
                    fixed_flags.get_or_insert_with(|| (flags.clone(), fit.clone()));
                    (flags, fit)
                }
            };
            flag_summary = Some(FlagSummary {
                detected_at_epoch: flags.epoch,
                clean: flags.clean_count(),
                noisy: flags.noisy_count(),
                gmm: fit.as_ref().map(GmmSummary::from),
            });
            if has_truth {
                detection = Some(detection_report(&flags, &train.pairs)?);
            }
            Some(flags)
        } else {
            None
        };

        let batch_store = if in_warmup { None } else { store.as_ref() };
        let loss = train_epoch(&mut state, &data, flags.as_ref(), batch_store, cfg, epoch)?;
        if !loss.total.is_finite() {
            return Err(NpcError::Numeric {
                pair_id: 0,
                message: format!("epoch {epoch} loss diverged"),
            });
        }

        let dev_report = match dev {
            Some(d) => Some(dev_metrics(&state.params, &data.vocab, d, cfg)?),
            None => None,
        };
        let mut best_changed = false;
        if let Some(r5) = dev_report.as_ref().and_then(|r| r.recall_at(5)) {
            if r5 > best_r5 {
                best_r5 = r5;
                out.best_params = state.params.clone();
                out.best_epoch = Some(epoch);
                best_changed = true;
            }
        } else {
            out.best_params = state.params.clone();
            out.best_epoch = Some(epoch);
            best_changed = true;
        }

        out.metrics.push(EpochMetrics {
            epoch,
            phase: if in_warmup { "warmup" } else { "train" }.to_string(),
            loss,
            optimizer_steps: state.optimizer.step,
            ema_steps: state.teacher.as_ref().map(|t| t.step),
            flags: flag_summary,
            detection,
            dev: dev_report,
        });
        out.params = state.params.clone();
        out.teacher = state.teacher.clone();
        if let Some(s) = sink {
            s.write_epoch(&out, cfg, best_changed)?;
        }
    }
    Ok(out)
}

pub fn detection_gmm_options() -> GmmOptions {
    GmmOptions::default()
}

/// Top-`k` oracle helper shared with tests: full sort of one query's scores.
pub fn brute_force_top_k(scores: &[(String, f64)], k: usize) -> Vec<String> {
    rank_scores(scores.to_vec(), k)
        .into_iter()
        .map(|(d, _)| d)
        .collect()
}
