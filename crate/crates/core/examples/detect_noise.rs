//! Warm up on a noisy corpus, score perplexities against in-batch negatives,
//! flag pairs and compare with the injected truth.
//!
//! `cargo run --release --example detect_noise -- [histogram.csv]`

use std::collections::BTreeMap;
use std::path::PathBuf;

use npc_core::data::{generate_synthetic, inject_noise, NoiseSpec, SyntheticConfig};
use npc_core::detection::{compute_perplexities, detect, detection_report};
use npc_core::evaluation::export_ppl_histogram;
use npc_core::training::{detection_gmm_options, warmup, TrainConfig, TrainerState, TrainingData};

fn main() -> npc_core::Result<()> {
    let hist = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "ppl_histogram.csv".into()),
    );
    let mut ds = generate_synthetic(&SyntheticConfig::new(20, 100, 500, 16, 7))?;
    ds.pairs = inject_noise(
        &ds.pairs,
        &NoiseSpec {
            ratio: 0.3,
            seed: 11,
        },
    )?;

    let cfg = TrainConfig {
        seed: 3,
        ..TrainConfig::default()
    };
    let data = TrainingData::new(&ds)?;
    let mut state = TrainerState::new(data.vocab.len(), &cfg);
    for (e, loss) in warmup(&mut state, &data, &cfg)?.iter().enumerate() {
        println!("warmup epoch {e}: contrastive loss {:.4}", loss.contrastive);
    }

    let epoch = cfg.warmup_epochs as u64;
    let records =
        compute_perplexities(&state.params, &data.pairs, &cfg.perplexity_config(), epoch)?;
    let (fit, flags) = detect(&records, &detection_gmm_options(), cfg.threshold, epoch)?;
    if let Some(f) = &fit {
        println!("mixture means {:.3?}, weights {:.3?}", f.means, f.weights);
    }
    let r = detection_report(&flags, &ds.pairs)?;
    println!(
        "noise detection: precision {:.3} recall {:.3} F1 {:.3} balanced accuracy {:.3}",
        r.precision, r.recall, r.f1, r.balanced_accuracy
    );

    let truth: BTreeMap<u64, bool> = ds
        .pairs
        .iter()
        .filter_map(|p| p.truth_clean.map(|t| (p.pair_id, t)))
        .collect();
    export_ppl_histogram(&records, Some(&flags), &truth, &hist)?;
    println!("histogram written to {}", hist.display());
    Ok(())
}
