//! Desk-scale dual encoder.
//!
//! A text is encoded as `tanh(P * mean(E[tokens]) + b)`, optionally
//! L2-normalized (always when the similarity is cosine, so cosine similarity
//! reduces to a dot product of the encoded vectors). Query and document
//! towers share weights unless configured otherwise.
//!
//! All parameters live in one flat `Vec<f64>` so the optimizer, the EMA
//! teacher and finite-difference checks can treat them uniformly.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correction::{consistency_logit_grad, CandidateSet, KlDirection};
use crate::error::{NpcError, Result};
use crate::numerics::{self, log_softmax_unchecked, ProbVector, SimilarityKind};

pub const UNKNOWN_TOKEN: &str = "[unk]";

/// Lowercase and split on anything that is not alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from a corpus. Tokens are sorted so the index
    /// assignment does not depend on corpus order. Index 0 is the unknown token.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let words = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && w != UNKNOWN_TOKEN)
            .map(|(w, _)| w);
        Self::from_tokens(
            std::iter::once(UNKNOWN_TOKEN.to_string())
                .chain(words)
                .collect(),
        )
    }

    /// Rebuilds a vocabulary from its stored token list (index order).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }
}

/// Out-of-vocabulary words map to 0; empty text becomes `[0]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    let ids: Vec<usize> = split_words(text)
        .iter()
        .map(|w| vocab.get(w).unwrap_or(0))
        .collect();
    if ids.is_empty() {
        vec![0]
    } else {
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Doc,
}

/// Trainable encoder weights, one or two towers laid out back to back.
///
/// Per tower: embedding table (`vocab_size x hidden`, row-major), projection
/// (`hidden x hidden`, row-major, `z_r = sum_c P[r][c] e_c + b_r`), bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub vocab_size: usize,
    pub hidden: usize,
    pub shared: bool,
    pub values: Vec<f64>,
}

impl EncoderParams {
    pub fn tower_len(vocab_size: usize, hidden: usize) -> usize {
        vocab_size * hidden + hidden * hidden + hidden
    }

    pub fn zeros(vocab_size: usize, hidden: usize, shared: bool) -> Self {
        let towers = if shared { 1 } else { 2 };
        EncoderParams {
            vocab_size,
            hidden,
            shared,
            values: vec![0.0; towers * Self::tower_len(vocab_size, hidden)],
        }
    }

    /// Uniform init in `[-scale, scale]`.
    pub fn init_uniform(
        vocab_size: usize,
        hidden: usize,
        shared: bool,
        scale: f64,
        seed: u64,
    ) -> Self {
        let mut params = Self::zeros(vocab_size, hidden, shared);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut params.values {
            *v = rng.random_range(-scale..=scale);
        }
        params
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn tower_offset(&self, side: Side) -> usize {
        match (side, self.shared) {
            (Side::Doc, false) => Self::tower_len(self.vocab_size, self.hidden),
            _ => 0,
        }
    }

    fn tower(&self, side: Side) -> TowerView<'_> {
        let off = self.tower_offset(side);
        let (v, h) = (self.vocab_size, self.hidden);
        let emb_end = off + v * h;
        let proj_end = emb_end + h * h;
        TowerView {
            hidden: h,
            embedding: &self.values[off..emb_end],
            projection: &self.values[emb_end..proj_end],
            bias: &self.values[proj_end..proj_end + h],
        }
    }

    pub fn same_shape(&self, other: &EncoderParams) -> bool {
        self.vocab_size == other.vocab_size
            && self.hidden == other.hidden
            && self.shared == other.shared
            && self.values.len() == other.values.len()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(NpcError::contract(format!(
                "non-finite parameter at flat index {i}"
            ))),
            None => Ok(()),
        }
    }
}

struct TowerView<'a> {
    hidden: usize,
    embedding: &'a [f64],
    projection: &'a [f64],
    bias: &'a [f64],
}

/// Per-batch gradient sums, same layout as [`EncoderParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAccumulator {
    pub values: Vec<f64>,
}

impl GradientAccumulator {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        GradientAccumulator {
            values: vec![0.0; params.len()],
        }
    }

    pub fn reset(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn norm(&self) -> f64 {
        numerics::l2_norm(&self.values)
    }

    /// Rescales to at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            self.values.iter_mut().for_each(|v| *v *= s);
        }
        norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    side: Side,
    tokens: Vec<usize>,
    mean: Vec<f64>,
    act: Vec<f64>,
    norm: f64,
    pub out: Vec<f64>,
    pub normalized: bool,
}

impl Encoded {
    pub fn embedding(&self) -> EmbeddingVector {
        EmbeddingVector {
            values: self.out.clone(),
            normalized: self.normalized,
        }
    }
}

pub fn encode_forward(
    tokens: &[usize],
    params: &EncoderParams,
    side: Side,
    normalize: bool,
) -> Result<Encoded> {
    if tokens.is_empty() {
        return Err(NpcError::contract("cannot encode an empty token sequence"));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= params.vocab_size) {
        return Err(NpcError::contract(format!(
            "token index {bad} out of range for vocabulary of size {}",
            params.vocab_size
        )));
    }
    let tower = params.tower(side);
    let h = tower.hidden;
    let mut mean = vec![0.0; h];
    for &t in tokens {
        let row = &tower.embedding[t * h..(t + 1) * h];
        mean.iter_mut().zip(row).for_each(|(m, e)| *m += e);
    }
    let inv = 1.0 / tokens.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);

    let act: Vec<f64> = (0..h)
        .map(|r| {
            (numerics::dot(&tower.projection[r * h..(r + 1) * h], &mean) + tower.bias[r]).tanh()
        })
        .collect();

    let (out, norm) = if normalize {
        let norm = numerics::l2_norm(&act);
        if norm == 0.0 || !norm.is_finite() {
            return Err(NpcError::contract(
                "degenerate norm: encoded vector has zero length",
            ));
        }
        (act.iter().map(|a| a / norm).collect(), norm)
    } else {
        (act.clone(), 1.0)
    };

    Ok(Encoded {
        side,
        tokens: tokens.to_vec(),
        mean,
        act,
        norm,
        out,
        normalized: normalize,
    })
}

pub fn encode(
    tokens: &[usize],
    params: &EncoderParams,
    side: Side,
    normalize: bool,
) -> Result<EmbeddingVector> {
    encode_forward(tokens, params, side, normalize).map(|e| e.embedding())
}

/// Accumulates `d loss / d params` given `d loss / d out`.
pub fn encode_backward(
    enc: &Encoded,
    grad_out: &[f64],
    params: &EncoderParams,
    grads: &mut GradientAccumulator,
) {
    let h = params.hidden;
    let off = params.tower_offset(enc.side);
    let v = params.vocab_size;

    let grad_act: Vec<f64> = if enc.normalized {
        let yg = numerics::dot(&enc.out, grad_out);
        grad_out
            .iter()
            .zip(&enc.out)
            .map(|(g, y)| (g - y * yg) / enc.norm)
            .collect()
    } else {
        grad_out.to_vec()
    };
    let grad_z: Vec<f64> = grad_act
        .iter()
        .zip(&enc.act)
        .map(|(g, a)| g * (1.0 - a * a))
        .collect();

    let tower = params.tower(enc.side);
    let emb_off = off;
    let proj_off = off + v * h;
    let bias_off = proj_off + h * h;

    let mut grad_mean = vec![0.0; h];
    for (r, &gz) in grad_z.iter().enumerate() {
        if gz == 0.0 {
            continue;
        }
        let prow = &mut grads.values[proj_off + r * h..proj_off + (r + 1) * h];
        prow.iter_mut()
            .zip(&enc.mean)
            .for_each(|(g, m)| *g += gz * m);
        grads.values[bias_off + r] += gz;
        let wrow = &tower.projection[r * h..(r + 1) * h];
        grad_mean
            .iter_mut()
            .zip(wrow)
            .for_each(|(g, w)| *g += gz * w);
    }

    let inv = 1.0 / enc.tokens.len() as f64;
    for &t in &enc.tokens {
        let row = &mut grads.values[emb_off + t * h..emb_off + (t + 1) * h];
        row.iter_mut()
            .zip(&grad_mean)
            .for_each(|(g, gm)| *g += gm * inv);
    }
}

/// `B x M` matrix of pairwise similarities.
pub fn similarity_matrix(
    queries: &[EmbeddingVector],
    docs: &[EmbeddingVector],
    kind: SimilarityKind,
) -> Result<Vec<Vec<f64>>> {
    queries
        .iter()
        .map(|q| {
            docs.iter()
                .map(|d| numerics::similarity(&q.values, &d.values, kind))
                .collect()
        })
        .collect()
}

/// Score of an encoded query/doc pair. Encoded vectors are already
/// normalized under cosine, so both kinds reduce to a dot product.
pub(crate) fn encoded_score(q: &[f64], d: &[f64]) -> f64 {
    numerics::dot(q, d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub similarity: SimilarityKind,
    pub kl_direction: KlDirection,
}

impl LossConfig {
    pub fn normalize(&self) -> bool {
        self.similarity == SimilarityKind::Cosine
    }
}

/// Token-level batch: queries, a pool of distinct documents, and one
/// candidate set per query indexing into the pool.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub pair_ids: Vec<u64>,
    pub queries: Vec<Vec<usize>>,
    pub docs: Vec<Vec<usize>>,
    pub candidates: Vec<CandidateSet>,
}

impl LossBatch {
    pub fn validate(&self) -> Result<()> {
        let b = self.queries.len();
        if b == 0 {
            return Err(NpcError::contract("empty batch"));
        }
        if self.pair_ids.len() != b || self.candidates.len() != b {
            return Err(NpcError::contract("batch field lengths disagree"));
        }
        for c in &self.candidates {
            c.validate()?;
            if let Some(&bad) = c.docs.iter().find(|&&d| d >= self.docs.len()) {
                return Err(NpcError::contract(format!(
                    "candidate doc {bad} outside the batch pool"
                )));
            }
        }
        Ok(())
    }
}

struct BatchForward {
    queries: Vec<Encoded>,
    docs: Vec<Encoded>,
    scores: Vec<Vec<f64>>,
}

fn forward_batch(
    batch: &LossBatch,
    params: &EncoderParams,
    normalize: bool,
) -> Result<BatchForward> {
    let queries = batch
        .queries
        .par_iter()
        .map(|q| encode_forward(q, params, Side::Query, normalize))
        .collect::<Result<Vec<_>>>()?;
    let docs = batch
        .docs
        .par_iter()
        .map(|d| encode_forward(d, params, Side::Doc, normalize))
        .collect::<Result<Vec<_>>>()?;
    let mut scores = Vec::with_capacity(queries.len());
    for (i, (q, cand)) in queries.iter().zip(&batch.candidates).enumerate() {
        let row: Vec<f64> = cand
            .docs
            .iter()
            .map(|&d| encoded_score(&q.out, &docs[d].out))
            .collect();
        if row.iter().any(|s| !s.is_finite()) {
            return Err(NpcError::Numeric {
                pair_id: batch.pair_ids[i],
                message: "non-finite similarity in forward pass".into(),
            });
        }
        scores.push(row);
    }
    Ok(BatchForward {
        queries,
        docs,
        scores,
    })
}

/// Candidate distributions `softmax(tau * f(q, d))` for every query.
pub fn batch_distributions(
    batch: &LossBatch,
    params: &EncoderParams,
    cfg: &LossConfig,
) -> Result<Vec<ProbVector>> {
    batch.validate()?;
    numerics::check_temperature(cfg.temperature)?;
    let fwd = forward_batch(batch, params, cfg.normalize())?;
    fwd.scores
        .iter()
        .map(|s| numerics::softmax(s, cfg.temperature))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    /// Mean over queries of `flag * L_cont + L_cons`.
    pub total: f64,
    /// Mean over queries of `flag * L_cont`.
    pub contrastive: f64,
    /// Mean over queries of `L_cons` (0 without a teacher).
    pub consistency: f64,
}

/// Batch loss `mean_i(flag_i * L_cont_i + L_cons_i)` and its exact gradient
/// with respect to the student parameters. Teacher distributions are
/// constants; without them the consistency term is absent.
pub fn loss_and_gradients(
    batch: &LossBatch,
    params: &EncoderParams,
    teacher: Option<&[ProbVector]>,
    flags: &[bool],
    cfg: &LossConfig,
) -> Result<(BatchLoss, GradientAccumulator)> {
    batch.validate()?;
    numerics::check_temperature(cfg.temperature)?;
    let b = batch.queries.len();
    if flags.len() != b {
        return Err(NpcError::contract(format!(
            "{} flags for a batch of {b}",
            flags.len()
        )));
    }
    if let Some(t) = teacher {
        if t.len() != b {
            return Err(NpcError::contract(format!(
                "{} teacher distributions for a batch of {b}",
                t.len()
            )));
        }
    }

    let fwd = forward_batch(batch, params, cfg.normalize())?;
    let h = params.hidden;
    let inv_b = 1.0 / b as f64;
    let mut loss = BatchLoss::default();
    let mut grad_q = vec![vec![0.0; h]; b];
    let mut grad_d = vec![vec![0.0; h]; batch.docs.len()];

    for i in 0..b {
        let cand = &batch.candidates[i];
        let log_p = log_softmax_unchecked(&fwd.scores[i], cfg.temperature);
        let p: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();

        let mut grad_logit = vec![0.0; p.len()];
        let mut cont = 0.0;
        if flags[i] {
            cont = -log_p[cand.positive];
            for (j, g) in grad_logit.iter_mut().enumerate() {
                *g += p[j] - if j == cand.positive { 1.0 } else { 0.0 };
            }
        }
        let mut cons = 0.0;
        if let Some(t) = teacher {
            let t = &t[i];
            if t.len() != p.len() {
                return Err(NpcError::contract(format!(
                    "teacher distribution for pair {} has {} entries, expected {}",
                    batch.pair_ids[i],
                    t.len(),
                    p.len()
                )));
            }
            let (value, g) = consistency_logit_grad(&p, &log_p, t.as_slice(), cfg.kl_direction);
            cons = value;
            grad_logit.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        if !(cont.is_finite() && cons.is_finite()) {
            return Err(NpcError::Numeric {
                pair_id: batch.pair_ids[i],
                message: format!("non-finite loss (contrastive {cont}, consistency {cons})"),
            });
        }
        loss.contrastive += cont * inv_b;
        loss.consistency += cons * inv_b;

        let q_out = &fwd.queries[i].out;
        for (j, &d) in cand.docs.iter().enumerate() {
            let gs = grad_logit[j] * cfg.temperature * inv_b;
            if gs == 0.0 {
                continue;
            }
            let d_out = &fwd.docs[d].out;
            grad_q[i]
                .iter_mut()
                .zip(d_out)
                .for_each(|(g, x)| *g += gs * x);
            grad_d[d]
                .iter_mut()
                .zip(q_out)
                .for_each(|(g, x)| *g += gs * x);
        }
    }
    loss.total = loss.contrastive + loss.consistency;

    let mut grads = GradientAccumulator::zeros_like(params);
    for (enc, g) in fwd.queries.iter().zip(&grad_q) {
        encode_backward(enc, g, params, &mut grads);
    }
    for (enc, g) in fwd.docs.iter().zip(&grad_d) {
        encode_backward(enc, g, params, &mut grads);
    }
    Ok((loss, grads))
}

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaMeta {
    pub alpha: f64,
    pub step: u64,
}

/// On-disk model record: JSON with the vocabulary token list (index order),
/// the flat parameter vector and a hash of the producing configuration.
/// Teacher checkpoints carry `ema`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub similarity: SimilarityKind,
    pub vocab: Vec<String>,
    pub params: EncoderParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema: Option<EmaMeta>,
}

impl Checkpoint {
    pub fn new(
        vocab: &Vocabulary,
        params: &EncoderParams,
        similarity: SimilarityKind,
        config_hash: String,
    ) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_hash,
            similarity,
            vocab: vocab.tokens().to_vec(),
            params: params.clone(),
            ema: None,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(self.vocab.clone())
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save_atomic(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(NpcError::Integrity(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        if ckpt.vocab.len() != ckpt.params.vocab_size {
            return Err(NpcError::Integrity(
                "checkpoint vocabulary and parameters disagree".into(),
            ));
        }
        let expected = EncoderParams::tower_len(ckpt.params.vocab_size, ckpt.params.hidden)
            * if ckpt.params.shared { 1 } else { 2 };
        if ckpt.params.values.len() != expected {
            return Err(NpcError::Integrity(
                "checkpoint parameter vector has the wrong length".into(),
            ));
        }
        Ok(ckpt)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| NpcError::contract(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
