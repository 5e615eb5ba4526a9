//! Detection quality after warmup, in-batch vs hard-negative perplexities,
//! iterative vs fixed flags, and warmup length.
//!
//! `cargo run --release --example ablations`

use npc_core::data::{generate_synthetic, inject_noise, NoiseSpec, SyntheticConfig};
use npc_core::detection::{compute_perplexities, detect, detection_report};
use npc_core::training::{
    detection_gmm_options, hard_negative_perplexities, mine_hard_negatives, run, warmup,
    TrainConfig, TrainerState, TrainingData,
};

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (
        m,
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt(),
    )
}

fn main() -> npc_core::Result<()> {
    let clean = generate_synthetic(&SyntheticConfig::new(20, 100, 500, 16, 7))?;
    let dev = generate_synthetic(&SyntheticConfig::new(20, 25, 500, 16, 8))?;
    let mut noisy30 = clean.clone();
    noisy30.pairs = inject_noise(
        &clean.pairs,
        &NoiseSpec {
            ratio: 0.3,
            seed: 11,
        },
    )?;
    let cfg = TrainConfig {
        seed: 3,
        ..TrainConfig::default()
    };

    // Detection right after warmup.
    let data = TrainingData::new(&noisy30)?;
    let mut state = TrainerState::new(data.vocab.len(), &cfg);
    warmup(&mut state, &data, &cfg)?;
    let ppl_cfg = cfg.perplexity_config();
    let epoch = cfg.warmup_epochs as u64;
    let records = compute_perplexities(&state.params, &data.pairs, &ppl_cfg, epoch)?;
    let (_, flags) = detect(&records, &detection_gmm_options(), cfg.threshold, epoch)?;
    let rep = detection_report(&flags, &noisy30.pairs)?;
    let split = |want: bool| -> Vec<f64> {
        records
            .iter()
            .zip(&noisy30.pairs)
            .filter(|(_, p)| p.truth_clean == Some(want))
            .map(|(r, _)| r.ppl)
            .collect()
    };
    let all: Vec<f64> = records.iter().map(|r| r.ppl).collect();
    println!(
        "in-batch ppl: balanced acc {:.4}, clean mean {:.3}, noisy mean {:.3}, overall std {:.3}",
        rep.balanced_accuracy,
        mean_std(&split(true)).0,
        mean_std(&split(false)).0,
        mean_std(&all).1
    );

    let store = mine_hard_negatives(
        &state.params,
        &data,
        cfg.hard_negatives_per_query,
        cfg.similarity,
    )?;
    let hard = hard_negative_perplexities(&state.params, &data, &store, &ppl_cfg, epoch)?;
    let (_, hflags) = detect(&hard, &detection_gmm_options(), cfg.threshold, epoch)?;
    println!(
        "hard-negative ppl: balanced acc {:.4}",
        detection_report(&hflags, &noisy30.pairs)?.balanced_accuracy
    );

    for iterative in [true, false] {
        let out = run(
            &TrainConfig {
                iterative_detection: iterative,
                ..cfg.clone()
            },
            &noisy30,
            None,
            None,
        )?;
        let f1 = out.metrics.last().and_then(|m| m.detection).map(|d| d.f1);
        println!("iterative_detection={iterative}: final-epoch F1 {f1:?}");
    }

    let mut noisy50 = clean.clone();
    noisy50.pairs = inject_noise(
        &clean.pairs,
        &NoiseSpec {
            ratio: 0.5,
            seed: 11,
        },
    )?;
    for warm in [3, 12] {
        let out = run(
            &TrainConfig {
                warmup_epochs: warm,
                ..cfg.clone()
            },
            &noisy50,
            Some(&dev),
            None,
        )?;
        println!(
            "warmup {warm}: final dev R@5 {:?}",
            out.final_dev().and_then(|d| d.recall_at(5))
        );
    }
    Ok(())
}
