//! Numerically stable primitives shared by the encoder, detector and
//! correction code: log-sum-exp, temperature softmax, KL divergence and
//! vector similarity.
//!
//! Temperatures are applied as score multipliers (`exp(tau * s)`), not as
//! divisors.

use serde::{Deserialize, Serialize};

use crate::error::{NpcError, Result};

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// A probability distribution over an ordered candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(NpcError::contract("probability vector must be non-empty"));
        }
        if values.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(NpcError::contract(
                "probability entries must be finite and >= 0",
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(NpcError::contract(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(ProbVector(values))
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(NpcError::contract("probability vector must be non-empty"));
        }
        Ok(ProbVector(vec![1.0 / len as f64; len]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    Cosine,
    InnerProduct,
}

impl std::str::FromStr for SimilarityKind {
    type Err = NpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(SimilarityKind::Cosine),
            "inner_product" | "inner-product" | "dot" => Ok(SimilarityKind::InnerProduct),
            other => Err(NpcError::config(format!(
                "unknown similarity kind {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimilarityKind::Cosine => f.write_str("cosine"),
            SimilarityKind::InnerProduct => f.write_str("inner_product"),
        }
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(NpcError::contract("score vector must be non-empty"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(NpcError::contract(format!("non-finite score {bad}")));
    }
    Ok(())
}

/// `log(sum(exp(s)))` with a max shift.
pub fn log_sum_exp(scores: &[f64]) -> Result<f64> {
    check_scores(scores)?;
    Ok(log_sum_exp_unchecked(scores))
}

/// Hot-path variant for callers that have already validated their input.
pub(crate) fn log_sum_exp_unchecked(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores.len() == 1 {
        return max;
    }
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    max + sum.ln()
}

/// Log-probabilities `tau * s_j - logsumexp(tau * s)`.
pub fn log_softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_scores(scores)?;
    check_temperature(temperature)?;
    Ok(log_softmax_unchecked(scores, temperature))
}

pub(crate) fn log_softmax_unchecked(scores: &[f64], temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = scores.iter().map(|s| temperature * s).collect();
    let lse = log_sum_exp_unchecked(&logits);
    logits.into_iter().map(|z| z - lse).collect()
}

pub fn softmax(scores: &[f64], temperature: f64) -> Result<ProbVector> {
    let logp = log_softmax(scores, temperature)?;
    Ok(ProbVector(logp.into_iter().map(f64::exp).collect()))
}

pub(crate) fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(NpcError::config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    Ok(())
}

/// `KL(p || q) = sum p_i ln(p_i / q_i)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(NpcError::contract(format!(
            "KL length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.0.iter().zip(q.0.iter()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(NpcError::contract(format!(
                "KL undefined: q[{i}] = 0 while p[{i}] = {pi}"
            )));
        }
        total += pi * (pi.ln() - qi.ln());
    }
    // Rounding can leave a tiny negative residue for p == q.
    Ok(total.max(0.0))
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn similarity(u: &[f64], v: &[f64], kind: SimilarityKind) -> Result<f64> {
    if u.len() != v.len() {
        return Err(NpcError::contract(format!(
            "similarity dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    match kind {
        SimilarityKind::InnerProduct => Ok(dot(u, v)),
        SimilarityKind::Cosine => {
            let nu = l2_norm(u);
            let nv = l2_norm(v);
            if nu == 0.0 || nv == 0.0 {
                return Err(NpcError::contract("cosine similarity of a zero vector"));
            }
            Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
        }
    }
}
