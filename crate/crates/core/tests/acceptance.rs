//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (no test harness) so every line is printed; exits
//! non-zero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::*;
use npc_core::correction::pair_loss;
use npc_core::data::Dataset;
use npc_core::detection::{
    compute_perplexities, detect, detection_report, fit_gmm_values, GmmOptions,
};
use npc_core::encoder::{encode, tokenize, EncoderParams, Side, Vocabulary};
use npc_core::evaluation::{
    export_ppl_histogram, mrr, read_ppl_histogram, recall_at_k, retrieve, RetrievalRun,
};
use npc_core::numerics::{
    kl_divergence, log_sum_exp, similarity, softmax, ProbVector, SimilarityKind,
};
use npc_core::training::{
    detection_gmm_options, hard_negative_perplexities, mine_hard_negatives, run, warmup, Method,
    RunOutput, RunSink, TrainConfig, TrainerState, TrainingData,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances and limits.
const PROPERTY_INSTANCES: usize = 10_000;
const SOFTMAX_TOL: f64 = 1e-9;
const COSINE_TOL: f64 = 1e-12;
const EM_SLACK: f64 = 1e-9;
const EM_MEAN_TOL: f64 = 0.1;
const EM_WEIGHT_TOL: f64 = 0.05;
const EM_ORACLE_TOL: f64 = 1e-6;
const IDENTITY_TOL: f64 = 1e-9;
const DETECTION_MIN_BALANCED_ACC: f64 = 0.80;
const ZERO_NOISE_SLACK: f64 = 0.02;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn base_cfg() -> TrainConfig {
    TrainConfig {
        seed: MODEL_SEED,
        ..TrainConfig::default()
    }
}

fn final_r5(out: &RunOutput) -> f64 {
    out.final_dev()
        .and_then(|d| d.recall_at(5))
        .expect("dev metrics")
}

fn final_f1(out: &RunOutput) -> f64 {
    out.metrics
        .last()
        .and_then(|m| m.detection)
        .expect("detection metrics")
        .f1
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> ProbVector {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..1.0)).collect();
    let s: f64 = w.iter().sum();
    ProbVector::new(w.into_iter().map(|x| x / s).collect()).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0usize;
    for _ in 0..PROPERTY_INSTANCES {
        let n = rng.random_range(1..12);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let tau = rng.random_range(0.01..30.0);
        let c = rng.random_range(-100.0..100.0);
        let p = softmax(&s, tau).unwrap();
        let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
        let q = softmax(&shifted, tau).unwrap();
        let sum_ok = (p.as_slice().iter().sum::<f64>() - 1.0).abs() < SOFTMAX_TOL;
        let shift_ok = p
            .as_slice()
            .iter()
            .zip(q.as_slice())
            .all(|(a, b)| (a - b).abs() < SOFTMAX_TOL);

        let m = rng.random_range(2..8);
        let (a, b) = (
            random_distribution(&mut rng, m),
            random_distribution(&mut rng, m),
        );
        let kl_ok =
            kl_divergence(&a, &b).unwrap() >= 0.0 && kl_divergence(&a, &a).unwrap().abs() < 1e-12;

        let big: Vec<f64> = (0..n).map(|_| rng.random_range(-1e6..1e6)).collect();
        let lse_ok = log_sum_exp(&big).unwrap().is_finite();

        let d = rng.random_range(1..8);
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let cos = similarity(&u, &v, SimilarityKind::Cosine).unwrap();
        let cos_ok = (-1.0 - COSINE_TOL..=1.0 + COSINE_TOL).contains(&cos);
        if !(sum_ok && shift_ok && kl_ok && lse_ok && cos_ok) {
            failures += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        failures == 0 && within(t, 10),
        format!("{PROPERTY_INSTANCES} instances x 4 invariants, {failures} failures, {t:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let worst = (0..50u64)
        .map(|s| max_relative_error(&instance(s, s as usize % 16)))
        .fold(0.0, f64::max);
    let t = start.elapsed();
    outcome(
        worst < MAX_REL && within(t, 30),
        format!("max relative error {worst:.3e} over 50 instances, {t:.2?}"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let opts = GmmOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut monotone = true;
    for _ in 0..100 {
        let n = rng.random_range(20..400);
        let (m1, m2) = (rng.random_range(0.0..3.0), rng.random_range(0.0..6.0));
        let x: Vec<f64> = (0..n)
            .map(|i| {
                if i % 3 == 0 {
                    gaussian(&mut rng, m2, 0.7)
                } else {
                    gaussian(&mut rng, m1, 0.3)
                }
            })
            .collect();
        let fit = fit_gmm_values(&x, &opts).unwrap();
        monotone &= fit
            .log_likelihood
            .windows(2)
            .all(|w| w[1] >= w[0] - EM_SLACK);
    }
    let mut x: Vec<f64> = (0..5000).map(|_| gaussian(&mut rng, 0.5, 0.2)).collect();
    x.extend((0..5000).map(|_| gaussian(&mut rng, 4.0, 0.2)));
    let fit = fit_gmm_values(&x, &opts).unwrap();
    let (lo, hi) = (fit.clean_component, 1 - fit.clean_component);
    let recovered = (fit.means[lo] - 0.5).abs() < EM_MEAN_TOL
        && (fit.means[hi] - 4.0).abs() < EM_MEAN_TOL
        && (fit.weights[lo] - 0.5).abs() < EM_WEIGHT_TOL
        && (fit.weights[hi] - 0.5).abs() < EM_WEIGHT_TOL;
    let (rw, rm, rv, _) = reference_em(&x, opts.max_iters, opts.tol, opts.variance_floor);
    let oracle = (0..2).all(|k| {
        (rw[k] - fit.weights[k]).abs() < EM_ORACLE_TOL
            && (rm[k] - fit.means[k]).abs() < EM_ORACLE_TOL
            && (rv[k] - fit.variances[k]).abs() < EM_ORACLE_TOL
    });
    let t = start.elapsed();
    outcome(
        monotone && recovered && oracle && within(t, 5),
        format!(
            "monotone on 100 sets: {monotone}; means {:.4}/{:.4} weights {:.4}/{:.4}; oracle agreement: {oracle}; {t:.2?}",
            fit.means[lo], fit.means[hi], fit.weights[lo], fit.weights[hi]
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ok = true;
    for _ in 0..1000 {
        let n = rng.random_range(2..8);
        let (s, t) = (
            random_distribution(&mut rng, n),
            random_distribution(&mut rng, n),
        );
        let pos = rng.random_range(0..n);
        // Flag 0: consistency term only.
        ok &= pair_loss(&s, &t, pos, false).unwrap() == kl_divergence(&s, &t).unwrap();
        // Teacher equal to student: contrastive term only.
        ok &= pair_loss(&s, &s, pos, true).unwrap() == -s[pos].ln();
    }
    let mut one_hot = vec![0.0; 4];
    one_hot[2] = 1.0;
    let perfect = ProbVector::new(one_hot).unwrap();
    let zero = pair_loss(&perfect, &perfect, 2, true).unwrap();
    ok &= zero.abs() < IDENTITY_TOL;
    outcome(
        ok,
        format!("flag-0, teacher==student and perfect-student identities; perfect loss {zero:e}"),
    )
}

fn oracle_run(params: &EncoderParams, vocab: &Vocabulary, ds: &Dataset, k: usize) -> RetrievalRun {
    let mut run = RetrievalRun::default();
    for p in &ds.pairs {
        let q = encode(&tokenize(&p.query_text, vocab), params, Side::Query, true).unwrap();
        let mut scored: Vec<(String, f64)> = ds
            .collection
            .iter()
            .map(|(id, text)| {
                let d = encode(&tokenize(text, vocab), params, Side::Doc, true).unwrap();
                (
                    id.to_string(),
                    similarity(&q.values, &d.values, SimilarityKind::Cosine).unwrap(),
                )
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        run.results.insert(p.query_id.clone(), scored);
    }
    run
}

fn criterion_5() -> Outcome {
    let ds = npc_core::data::generate_synthetic(&npc_core::data::SyntheticConfig::new(
        5, 20, 100, 12, 5,
    ))
    .unwrap();
    let vocab = Vocabulary::build(
        ds.collection
            .iter()
            .map(|(_, t)| t)
            .chain(ds.pairs.iter().map(|p| p.query_text.as_str())),
        1,
    );
    let params = EncoderParams::init_uniform(vocab.len(), 16, true, 0.3, 5);
    let queries: Vec<(String, String)> = ds
        .pairs
        .iter()
        .take(50)
        .map(|p| (p.query_id.clone(), p.query_text.clone()))
        .collect();
    let sub = Dataset {
        pairs: ds.pairs[..50].to_vec(),
        collection: ds.collection.clone(),
    };
    let gold = sub.gold();
    let got = retrieve(
        &params,
        &vocab,
        &queries,
        &ds.collection,
        100,
        SimilarityKind::Cosine,
    )
    .unwrap();
    let want = oracle_run(&params, &vocab, &sub, 100);
    let same_lists = got.results.len() == 50
        && got.results.iter().all(|(q, l)| {
            let w = &want.results[q];
            l.iter().map(|x| &x.0).eq(w.iter().map(|x| &x.0))
        });
    // Metric oracle: hand count of gold ranks from the oracle lists.
    let ranks: Vec<Option<usize>> = want
        .results
        .iter()
        .map(|(q, l)| l.iter().position(|(d, _)| *d == gold[q]).map(|r| r + 1))
        .collect();
    let mut metrics_equal = true;
    for k in [1, 5, 20, 100] {
        let hand = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / 50.0;
        metrics_equal &= recall_at_k(&got, &gold, k).unwrap() == hand;
    }
    let hand_mrr = ranks
        .iter()
        .map(|r| r.map_or(0.0, |r| 1.0 / r as f64))
        .sum::<f64>()
        / 50.0;
    metrics_equal &= (mrr(&got, &gold).unwrap() - hand_mrr).abs() == 0.0;
    outcome(
        same_lists && metrics_equal,
        format!(
            "100 docs x 50 queries: rankings equal {same_lists}, metrics equal {metrics_equal}"
        ),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Student after warmup on the fixed 30%-noise dataset.
fn warmed_up(noisy30: &Dataset) -> (TrainingData, TrainerState, TrainConfig) {
    let cfg = base_cfg();
    let data = TrainingData::new(noisy30).unwrap();
    let mut state = TrainerState::new(data.vocab.len(), &cfg);
    warmup(&mut state, &data, &cfg).unwrap();
    (data, state, cfg)
}

fn criterion_6(
    noisy30: &Dataset,
    warm: &(TrainingData, TrainerState, TrainConfig),
    warmup_time: Duration,
) -> Outcome {
    let start = Instant::now();
    let (data, state, cfg) = warm;
    let epoch = cfg.warmup_epochs as u64;
    let records =
        compute_perplexities(&state.params, &data.pairs, &cfg.perplexity_config(), epoch).unwrap();
    let (_, flags) = detect(&records, &detection_gmm_options(), cfg.threshold, epoch).unwrap();
    let report = detection_report(&flags, &noisy30.pairs).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ppl.csv");
    let truth: BTreeMap<u64, bool> = noisy30
        .pairs
        .iter()
        .map(|p| (p.pair_id, p.truth_clean.unwrap()))
        .collect();
    export_ppl_histogram(&records, Some(&flags), &truth, &path).unwrap();
    let rows = read_ppl_histogram(&path).unwrap();
    let clean: Vec<f64> = rows
        .iter()
        .filter(|r| r.truth_clean == Some(true))
        .map(|r| r.ppl)
        .collect();
    let noisy: Vec<f64> = rows
        .iter()
        .filter(|r| r.truth_clean == Some(false))
        .map(|r| r.ppl)
        .collect();
    let all: Vec<f64> = rows.iter().map(|r| r.ppl).collect();
    let (mc, mn, sd) = (mean(&clean), mean(&noisy), sample_std(&all));
    let t = start.elapsed() + warmup_time;
    outcome(
        report.balanced_accuracy >= DETECTION_MIN_BALANCED_ACC && mc < mn && mn - mc > sd && within(t, 180),
        format!(
            "balanced accuracy {:.4} (>= {DETECTION_MIN_BALANCED_ACC}); clean mean {mc:.3} < noisy mean {mn:.3}, gap {:.3} vs std {sd:.3}; {t:.1?}",
            report.balanced_accuracy,
            mn - mc
        ),
    )
}

fn criterion_7(clean: &Dataset, dev: &Dataset) -> (Outcome, RunOutput) {
    let start = Instant::now();
    let mut gaps = Vec::new();
    let mut detail = Vec::new();
    let mut npc50 = None;
    let mut zero_ok = false;
    for ratio in [0.0, 0.2, 0.5] {
        let ds = with_noise(clean, ratio);
        let base = run(
            &TrainConfig {
                method: Method::Baseline,
                ..base_cfg()
            },
            &ds,
            Some(dev),
            None,
        )
        .unwrap();
        let npc = run(&base_cfg(), &ds, Some(dev), None).unwrap();
        let (b, n) = (final_r5(&base), final_r5(&npc));
        if ratio == 0.0 {
            zero_ok = n >= b - ZERO_NOISE_SLACK;
        }
        gaps.push(n - b);
        detail.push(format!("{:.0}%: npc {n:.3} base {b:.3}", ratio * 100.0));
        if ratio == 0.5 {
            npc50 = Some(npc);
        }
    }
    let t = start.elapsed();
    let pass =
        gaps[2] > 0.0 && gaps[2] >= gaps[1] && gaps[1] >= gaps[0] && zero_ok && within(t, 900);
    (
        outcome(
            pass,
            format!(
                "dev R@5 {}; gaps {:+.3} {:+.3} {:+.3}; {t:.1?}",
                detail.join(", "),
                gaps[0],
                gaps[1],
                gaps[2]
            ),
        ),
        npc50.unwrap(),
    )
}

fn criterion_8(clean: &Dataset, dev: &Dataset, warm3: &RunOutput) -> Outcome {
    let ds = with_noise(clean, 0.5);
    let long = run(
        &TrainConfig {
            warmup_epochs: 12,
            ..base_cfg()
        },
        &ds,
        Some(dev),
        None,
    )
    .unwrap();
    let (a, b) = (final_r5(&long), final_r5(warm3));
    outcome(
        a <= b,
        format!("50% noise: R@5 warmup 12 = {a:.3}, warmup 3 = {b:.3}"),
    )
}

fn criterion_9(noisy30: &Dataset, warm: &(TrainingData, TrainerState, TrainConfig)) -> Outcome {
    let (data, state, cfg) = warm;
    let epoch = cfg.warmup_epochs as u64;
    let ppl_cfg = cfg.perplexity_config();
    let easy = compute_perplexities(&state.params, &data.pairs, &ppl_cfg, epoch).unwrap();
    let store = mine_hard_negatives(
        &state.params,
        data,
        cfg.hard_negatives_per_query,
        cfg.similarity,
    )
    .unwrap();
    let hard = hard_negative_perplexities(&state.params, data, &store, &ppl_cfg, epoch).unwrap();
    let ba = |r| {
        let (_, f) = detect(r, &detection_gmm_options(), cfg.threshold, epoch).unwrap();
        detection_report(&f, &noisy30.pairs)
            .unwrap()
            .balanced_accuracy
    };
    let (e, h) = (ba(&easy), ba(&hard));
    outcome(
        h < e,
        format!("balanced accuracy: hard-negative ppl {h:.4} vs in-batch ppl {e:.4}"),
    )
}

fn criterion_10(noisy30: &Dataset) -> Outcome {
    let iterative = run(&base_cfg(), noisy30, None, None).unwrap();
    let fixed = run(
        &TrainConfig {
            iterative_detection: false,
            ..base_cfg()
        },
        noisy30,
        None,
        None,
    )
    .unwrap();
    let (i, f) = (final_f1(&iterative), final_f1(&fixed));
    outcome(
        f <= i,
        format!("final-epoch detection F1: fixed {f:.4} vs iterative {i:.4}"),
    )
}

fn criterion_11(noisy30: &Dataset, dev: &Dataset) -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let logs: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| {
            let sink = RunSink {
                out_dir: d.path().to_path_buf(),
            };
            run(&base_cfg(), noisy30, Some(dev), Some(&sink)).unwrap();
            std::fs::read(d.path().join("metrics.jsonl")).unwrap()
        })
        .collect();
    let same = logs[0] == logs[1] && !logs[0].is_empty();
    outcome(
        same,
        format!(
            "metrics.jsonl byte-identical across two runs ({} bytes)",
            logs[0].len()
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!(
            "{} criterion {n}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());

    let clean = synthetic_train();
    let dev = synthetic_dev();
    let noisy30 = with_noise(&clean, 0.3);
    let t = Instant::now();
    let warm = warmed_up(&noisy30);
    report(6, criterion_6(&noisy30, &warm, t.elapsed()));
    let (c7, npc50) = criterion_7(&clean, &dev);
    report(7, c7);
    report(8, criterion_8(&clean, &dev, &npc50));
    report(9, criterion_9(&noisy30, &warm));
    report(10, criterion_10(&noisy30));
    report(11, criterion_11(&noisy30, &dev));

    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, o)| !o.pass)
        .map(|(n, _)| *n)
        .collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
