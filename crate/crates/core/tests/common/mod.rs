//! Shared fixtures and oracles for the integration tests.
#![allow(dead_code)]

use npc_core::correction::{CandidateSet, KlDirection};
use npc_core::data::{generate_synthetic, inject_noise, Dataset, NoiseSpec, SyntheticConfig};
use npc_core::encoder::{
    batch_distributions, loss_and_gradients, EncoderParams, LossBatch, LossConfig,
};
use npc_core::numerics::{ProbVector, SimilarityKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const MAX_REL: f64 = 1e-4;

pub struct Instance {
    pub batch: LossBatch,
    pub params: EncoderParams,
    pub teacher: Option<Vec<ProbVector>>,
    pub flags: Vec<bool>,
    pub cfg: LossConfig,
}

fn random_tokens(rng: &mut ChaCha8Rng, v: usize) -> Vec<usize> {
    (0..rng.random_range(1..=4))
        .map(|_| rng.random_range(0..v))
        .collect()
}

/// B=2, h=4, V=10; loss path picked from `case`.
pub fn instance(seed: u64, case: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v, h) = (10, 4);
    let similarity = if case & 1 == 0 {
        SimilarityKind::Cosine
    } else {
        SimilarityKind::InnerProduct
    };
    let with_teacher = case & 2 != 0;
    let shared = case & 4 == 0;
    let kl_direction = if case & 8 == 0 {
        KlDirection::StudentTeacher
    } else {
        KlDirection::TeacherStudent
    };
    let params = EncoderParams::init_uniform(v, h, shared, 0.8, seed ^ 0xabc);
    let docs: Vec<Vec<usize>> = (0..3).map(|_| random_tokens(&mut rng, v)).collect();
    let batch = LossBatch {
        pair_ids: vec![10, 11],
        queries: (0..2).map(|_| random_tokens(&mut rng, v)).collect(),
        docs,
        candidates: vec![
            CandidateSet {
                docs: vec![0, 1, 2],
                positive: 0,
            },
            CandidateSet {
                docs: vec![0, 1, 2],
                positive: 1,
            },
        ],
    };
    let cfg = LossConfig {
        temperature: rng.random_range(0.5..3.0),
        similarity,
        kl_direction,
    };
    let teacher = with_teacher.then(|| {
        let other = EncoderParams::init_uniform(v, h, shared, 0.8, seed ^ 0xdef);
        batch_distributions(&batch, &other, &cfg).unwrap()
    });
    let flags = vec![rng.random_bool(0.5), rng.random_bool(0.5)];
    Instance {
        batch,
        params,
        teacher,
        flags,
        cfg,
    }
}

fn loss_at(inst: &Instance, params: &EncoderParams) -> f64 {
    loss_and_gradients(
        &inst.batch,
        params,
        inst.teacher.as_deref(),
        &inst.flags,
        &inst.cfg,
    )
    .unwrap()
    .0
    .total
}

/// Max relative error over all parameters; denominator floored at 1e-8.
pub fn max_relative_error(inst: &Instance) -> f64 {
    let (_, grads) = loss_and_gradients(
        &inst.batch,
        &inst.params,
        inst.teacher.as_deref(),
        &inst.flags,
        &inst.cfg,
    )
    .unwrap();
    let mut worst = 0.0f64;
    let mut p = inst.params.clone();
    for i in 0..p.len() {
        let orig = p.values[i];
        p.values[i] = orig + STEP;
        let up = loss_at(inst, &p);
        p.values[i] = orig - STEP;
        let down = loss_at(inst, &p);
        p.values[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = grads.values[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Seeds of the fixed experimental setup.
pub const TRAIN_SEED: u64 = 7;
pub const DEV_SEED: u64 = 8;
pub const NOISE_SEED: u64 = 11;
pub const MODEL_SEED: u64 = 3;

/// 20 topics x 100 pairs, vocabulary 500, 16 tokens per text.
pub fn synthetic_train() -> Dataset {
    generate_synthetic(&SyntheticConfig::new(20, 100, 500, 16, TRAIN_SEED)).unwrap()
}

/// Clean held-out split on the same topic layout.
pub fn synthetic_dev() -> Dataset {
    generate_synthetic(&SyntheticConfig::new(20, 25, 500, 16, DEV_SEED)).unwrap()
}

pub fn with_noise(clean: &Dataset, ratio: f64) -> Dataset {
    let mut ds = clean.clone();
    ds.pairs = inject_noise(
        &clean.pairs,
        &NoiseSpec {
            ratio,
            seed: NOISE_SEED,
        },
    )
    .unwrap();
    ds
}

/// Textbook 1-D two-component EM, written independently of the library:
/// plain densities (no log-space), same initialization and stopping rule.
pub fn reference_em(
    x: &[f64],
    max_iters: usize,
    tol: f64,
    floor: f64,
) -> ([f64; 2], [f64; 2], [f64; 2], Vec<f64>) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut s = x.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |q: f64| {
        let pos = q * (s.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
    };
    let (mut mu, mut w, mut v) = ([pct(0.1), pct(0.9)], [0.5, 0.5], [var.max(floor); 2]);
    let pdf = |x: f64, m: f64, v: f64| {
        (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    };
    let mut trace: Vec<f64> = Vec::new();
    for _ in 0..max_iters {
        let mut r = Vec::with_capacity(x.len());
        let mut ll = 0.0;
        for &xi in x {
            let a = w[0] * pdf(xi, mu[0], v[0]);
            let b = w[1] * pdf(xi, mu[1], v[1]);
            ll += (a + b).ln();
            r.push(a / (a + b));
        }
        let ll = ll / n;
        let done = trace.last().is_some_and(|p| ll - p < tol);
        trace.push(ll);
        if done {
            break;
        }
        let n0: f64 = r.iter().sum();
        let n1 = n - n0;
        mu = [
            r.iter().zip(x).map(|(ri, xi)| ri * xi).sum::<f64>() / n0,
            r.iter().zip(x).map(|(ri, xi)| (1.0 - ri) * xi).sum::<f64>() / n1,
        ];
        v = [
            (r.iter()
                .zip(x)
                .map(|(ri, xi)| ri * (xi - mu[0]).powi(2))
                .sum::<f64>()
                / n0)
                .max(floor),
            (r.iter()
                .zip(x)
                .map(|(ri, xi)| (1.0 - ri) * (xi - mu[1]).powi(2))
                .sum::<f64>()
                / n1)
                .max(floor),
        ];
        w = [n0 / n, n1 / n];
    }
    (w, mu, v, trace)
}

/// Gaussian sample by Box-Muller.
pub fn gaussian(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    mean + sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
