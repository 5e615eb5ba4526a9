//! Mismatched-pair detection.
//!
//! Each pair gets a perplexity, the negative log-likelihood of its annotated
//! document against easy (in-batch) negatives. A two-component 1-D Gaussian
//! mixture is fitted to all perplexities by EM; a pair is flagged clean when
//! its posterior under the lower-mean component exceeds a threshold.
//!
//! Nothing in this module can see mined hard negatives: perplexities are
//! only ever computed against the other documents of a shuffled batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batches, TrainingPair};
use crate::encoder::{encode_forward, encoded_score, EmbeddingVector, EncoderParams, Side};
use crate::error::{NpcError, Result};
use crate::numerics::{self, log_sum_exp_unchecked, SimilarityKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexityRecord {
    pub pair_id: u64,
    pub ppl: f64,
}

/// `-log(e^{tau f(q,d+)} / (e^{tau f(q,d+)} + sum_j e^{tau f(q,d_j)}))`.
pub fn pair_perplexity(
    query: &EmbeddingVector,
    positive: &EmbeddingVector,
    negatives: &[EmbeddingVector],
    kind: SimilarityKind,
    temperature: f64,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(NpcError::contract("perplexity needs at least one negative"));
    }
    numerics::check_temperature(temperature)?;
    let pos = numerics::similarity(&query.values, &positive.values, kind)?;
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(temperature * pos);
    for n in negatives {
        logits.push(temperature * numerics::similarity(&query.values, &n.values, kind)?);
    }
    let lse = numerics::log_sum_exp(&logits)?;
    Ok((lse - logits[0]).max(0.0))
}

/// Token ids of the training pairs, aligned with the pair list.
#[derive(Debug, Clone)]
pub struct PairTokens {
    pub pair_ids: Vec<u64>,
    pub queries: Vec<Vec<usize>>,
    pub docs: Vec<Vec<usize>>,
    pub doc_ids: Vec<String>,
}

impl PairTokens {
    pub fn new(pairs: &[TrainingPair], vocab: &crate::encoder::Vocabulary) -> Self {
        PairTokens {
            pair_ids: pairs.iter().map(|p| p.pair_id).collect(),
            queries: pairs
                .iter()
                .map(|p| crate::encoder::tokenize(&p.query_text, vocab))
                .collect(),
            docs: pairs
                .iter()
                .map(|p| crate::encoder::tokenize(&p.doc_text, vocab))
                .collect(),
            doc_ids: pairs.iter().map(|p| p.doc_id.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerplexityConfig {
    pub batch_size: usize,
    pub temperature: f64,
    pub similarity: SimilarityKind,
    pub seed: u64,
}

/// Salt separating detection batches from training batches of the same epoch.
const DETECTION_STREAM: u64 = 0x5eed_de7e_c700_0000;

/// One record per pair, in pair order. Negatives are the other documents of
/// the pair's (seeded, shuffled) batch; documents sharing the positive's id
/// are skipped.
pub fn compute_perplexities(
    params: &EncoderParams,
    pairs: &PairTokens,
    cfg: &PerplexityConfig,
    epoch: u64,
) -> Result<Vec<PerplexityRecord>> {
    numerics::check_temperature(cfg.temperature)?;
    let normalize = cfg.similarity == SimilarityKind::Cosine;
    let groups = batches(
        pairs.len(),
        cfg.batch_size,
        cfg.seed ^ DETECTION_STREAM,
        epoch,
    )?;
    let per_batch = groups
        .par_iter()
        .map(|batch| -> Result<Vec<(usize, f64)>> {
            if batch.len() < 2 {
                return Err(NpcError::contract(
                    "perplexity batch of size 1 has no negatives",
                ));
            }
            let qs = batch
                .iter()
                .map(|&i| encode_forward(&pairs.queries[i], params, Side::Query, normalize))
                .collect::<Result<Vec<_>>>()?;
            let ds = batch
                .iter()
                .map(|&i| encode_forward(&pairs.docs[i], params, Side::Doc, normalize))
                .collect::<Result<Vec<_>>>()?;
            let mut out = Vec::with_capacity(batch.len());
            for (a, &i) in batch.iter().enumerate() {
                let mut logits = vec![cfg.temperature * encoded_score(&qs[a].out, &ds[a].out)];
                for (b, &j) in batch.iter().enumerate() {
                    if b != a && pairs.doc_ids[j] != pairs.doc_ids[i] {
                        logits.push(cfg.temperature * encoded_score(&qs[a].out, &ds[b].out));
                    }
                }
                if logits.len() < 2 {
                    return Err(NpcError::contract(format!(
                        "pair {} has no distinct in-batch negative",
                        pairs.pair_ids[i]
                    )));
                }
                let ppl = log_sum_exp_unchecked(&logits) - logits[0];
                if !ppl.is_finite() {
                    return Err(NpcError::Numeric {
                        pair_id: pairs.pair_ids[i],
                        message: "non-finite perplexity".into(),
                    });
                }
                out.push((i, ppl.max(0.0)));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut ppl = vec![0.0; pairs.len()];
    for (i, v) in per_batch.into_iter().flatten() {
        ppl[i] = v;
    }
    Ok(pairs
        .pair_ids
        .iter()
        .zip(ppl)
        .map(|(&pair_id, ppl)| PerplexityRecord { pair_id, ppl })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmOptions {
    pub max_iters: usize,
    /// Stop when the mean log-likelihood improves by less than this.
    pub tol: f64,
    pub variance_floor: f64,
    /// Initialize component 0 at the high percentile instead of the low one.
    pub swap_init: bool,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            max_iters: 200,
            tol: 1e-9,
            variance_floor: 1e-6,
            swap_init: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
    /// Index of the lower-mean component.
    pub clean_component: usize,
    /// Mean log-likelihood per point, one entry per E-step.
    pub log_likelihood: Vec<f64>,
    /// Components collapsed onto each other or one of them is empty.
    pub degenerate: bool,
}

impl GmmFit {
    pub fn iterations(&self) -> usize {
        self.log_likelihood.len()
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean) * (x - mean) / var)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn fit_gmm(records: &[PerplexityRecord], opts: &GmmOptions) -> Result<GmmFit> {
    let values: Vec<f64> = records.iter().map(|r| r.ppl).collect();
    fit_gmm_values(&values, opts)
}

/// Two-component 1-D EM. Means start at the 10th/90th percentiles, weights
/// equal, variances at the sample variance.
pub fn fit_gmm_values(values: &[f64], opts: &GmmOptions) -> Result<GmmFit> {
    if values.len() < 2 {
        return Err(NpcError::contract("mixture fit needs at least 2 values"));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(NpcError::contract(format!(
            "non-finite value {bad} in mixture input"
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sample_var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if values.iter().all(|&v| v == values[0]) {
        return Err(NpcError::Degenerate(
            "all perplexities are identical".into(),
        ));
    }

    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (percentile(&sorted, 0.1), percentile(&sorted, 0.9));
    let mut means = if opts.swap_init { [hi, lo] } else { [lo, hi] };
    let mut weights = [0.5f64, 0.5];
    let mut vars = [sample_var.max(opts.variance_floor); 2];
    let mut trace = Vec::new();
    let mut resp = vec![[0.0f64; 2]; values.len()];

    for _ in 0..opts.max_iters {
        // E-step.
        let mut ll = 0.0;
        for (x, r) in values.iter().zip(resp.iter_mut()) {
            let l = [0, 1].map(|k| {
                if weights[k] > 0.0 {
                    weights[k].ln() + log_normal(*x, means[k], vars[k])
                } else {
                    f64::NEG_INFINITY
                }
            });
            let lse = log_sum_exp_unchecked(&l);
            ll += lse;
            *r = [(l[0] - lse).exp(), (l[1] - lse).exp()];
        }
        let ll = ll / n;
        let converged = trace.last().is_some_and(|prev: &f64| ll - prev < opts.tol);
        trace.push(ll);
        if converged {
            break;
        }
        // M-step.
        for k in 0..2 {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            weights[k] = nk / n;
            if nk <= f64::MIN_POSITIVE {
                weights[k] = 0.0;
                continue;
            }
            means[k] = values.iter().zip(&resp).map(|(x, r)| r[k] * x).sum::<f64>() / nk;
            let v = values
                .iter()
                .zip(&resp)
                .map(|(x, r)| r[k] * (x - means[k]) * (x - means[k]))
                .sum::<f64>()
                / nk;
            vars[k] = v.max(opts.variance_floor);
        }
    }

    let clean_component = if means[1] < means[0] { 1 } else { 0 };
    let degenerate =
        (means[0] - means[1]).abs() < 0.05 * sample_var.sqrt() || weights[0].min(weights[1]) < 1e-3;
    Ok(GmmFit {
        weights,
        means,
        variances: vars,
        clean_component,
        log_likelihood: trace,
        degenerate,
    })
}

/// Posterior probability of the clean (lower-mean) component, in log space.
pub fn posterior_clean(fit: &GmmFit, ppl: f64) -> f64 {
    let l = [0, 1].map(|k| {
        if fit.weights[k] > 0.0 {
            fit.weights[k].ln() + log_normal(ppl, fit.means[k], fit.variances[k])
        } else {
            f64::NEG_INFINITY
        }
    });
    (l[fit.clean_component] - log_sum_exp_unchecked(&l)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlagEntry {
    pub pair_id: u64,
    pub clean: bool,
    pub posterior: f64,
}

/// Per-pair clean flags for one epoch, sorted by pair id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagSet {
    pub epoch: u64,
    pub entries: Vec<FlagEntry>,
}

impl FlagSet {
    fn from_entries(epoch: u64, mut entries: Vec<FlagEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.pair_id);
        if entries.windows(2).any(|w| w[0].pair_id == w[1].pair_id) {
            return Err(NpcError::contract("duplicate pair id in flag set"));
        }
        Ok(FlagSet { epoch, entries })
    }

    /// Every pair clean with posterior 1.
    pub fn all_clean(records: &[PerplexityRecord], epoch: u64) -> Result<Self> {
        Self::from_entries(
            epoch,
            records
                .iter()
                .map(|r| FlagEntry {
                    pair_id: r.pair_id,
                    clean: true,
                    posterior: 1.0,
                })
                .collect(),
        )
    }

    pub fn get(&self, pair_id: u64) -> Option<&FlagEntry> {
        self.entries
            .binary_search_by_key(&pair_id, |e| e.pair_id)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn is_clean(&self, pair_id: u64) -> Option<bool> {
        self.get(pair_id).map(|e| e.clean)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clean_count(&self) -> usize {
        self.entries.iter().filter(|e| e.clean).count()
    }

    pub fn noisy_count(&self) -> usize {
        self.len() - self.clean_count()
    }
}

/// `clean = posterior > threshold` (strict). A degenerate fit flags every
/// pair clean.
pub fn estimate_flags(
    fit: &GmmFit,
    records: &[PerplexityRecord],
    threshold: f64,
    epoch: u64,
) -> Result<FlagSet> {
    let entries = records
        .iter()
        .map(|r| {
            let posterior = posterior_clean(fit, r.ppl);
            FlagEntry {
                pair_id: r.pair_id,
                clean: fit.degenerate || posterior > threshold,
                posterior,
            }
        })
        .collect();
    FlagSet::from_entries(epoch, entries)
}

/// Fit + flags, falling back to all-clean when the input has no spread.
pub fn detect(
    records: &[PerplexityRecord],
    opts: &GmmOptions,
    threshold: f64,
    epoch: u64,
) -> Result<(Option<GmmFit>, FlagSet)> {
    match fit_gmm(records, opts) {
        Ok(fit) => {
            let flags = estimate_flags(&fit, records, threshold, epoch)?;
            Ok((Some(fit), flags))
        }
        Err(NpcError::Degenerate(_)) => Ok((None, FlagSet::all_clean(records, epoch)?)),
        Err(e) => Err(e),
    }
}

/// Noise-detection quality with "noisy" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
}

/// Empty denominators: precision/recall are 1 when there is nothing to find
/// and nothing was flagged, 0 otherwise; balanced accuracy averages the
/// classes that are present.
pub fn detection_report(flags: &FlagSet, pairs: &[TrainingPair]) -> Result<DetectionReport> {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for p in pairs {
        let truth = p.truth_clean.ok_or_else(|| {
            NpcError::contract(format!("pair {:?} has no ground-truth label", p.query_id))
        })?;
        let clean = flags
            .is_clean(p.pair_id)
            .ok_or_else(|| NpcError::contract(format!("no flag for pair {}", p.pair_id)))?;
        match (truth, clean) {
            (false, false) => tp += 1,
            (true, false) => fp += 1,
            (true, true) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize, empty: f64| {
        if den == 0 {
            empty
        } else {
            num as f64 / den as f64
        }
    };
    let nothing_noisy = tp + fn_ == 0;
    let precision = ratio(tp, tp + fp, if nothing_noisy { 1.0 } else { 0.0 });
    let recall = ratio(tp, tp + fn_, 1.0);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let mut rates = Vec::new();
    if tp + fn_ > 0 {
        rates.push(tp as f64 / (tp + fn_) as f64);
    }
    if tn + fp > 0 {
        rates.push(tn as f64 / (tn + fp) as f64);
    }
    let balanced_accuracy = if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    };
    Ok(DetectionReport {
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
        precision,
        recall,
        f1,
        balanced_accuracy,
    })
}
