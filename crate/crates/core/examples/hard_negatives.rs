//! Mine hard negatives with a warmed-up encoder and train with them.
//!
//! `cargo run --release --example hard_negatives`

use npc_core::data::{generate_synthetic, inject_noise, NoiseSpec, SyntheticConfig};
use npc_core::training::{
    mine_hard_negatives, run, warmup, Negatives, TrainConfig, TrainerState, TrainingData,
};

fn main() -> npc_core::Result<()> {
    let mut train = generate_synthetic(&SyntheticConfig::new(20, 100, 500, 16, 7))?;
    train.pairs = inject_noise(
        &train.pairs,
        &NoiseSpec {
            ratio: 0.2,
            seed: 11,
        },
    )?;
    let dev = generate_synthetic(&SyntheticConfig::new(20, 25, 500, 16, 8))?;

    let cfg = TrainConfig {
        negatives: Negatives::Hard,
        hard_negatives_per_query: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let data = TrainingData::new(&train)?;
    let mut state = TrainerState::new(data.vocab.len(), &cfg);
    warmup(&mut state, &data, &cfg)?;
    let store = mine_hard_negatives(&state.params, &data, 2, cfg.similarity)?;
    println!(
        "pair 0 ({}): positive {}, mined {:?}",
        train.pairs[0].query_id,
        train.pairs[0].doc_id,
        store.doc_ids(&data, 0)
    );

    let out = run(&cfg, &train, Some(&dev), None)?;
    for m in &out.metrics {
        let r5 = m
            .dev
            .as_ref()
            .and_then(|d| d.recall_at(5))
            .unwrap_or(f64::NAN);
        let flags = m
            .flags
            .as_ref()
            .map(|f| format!("{} clean / {} noisy", f.clean, f.noisy))
            .unwrap_or_default();
        println!(
            "epoch {:>2} {:<6} loss {:.4} dev R@5 {r5:.3} {flags}",
            m.epoch, m.phase, m.loss.total
        );
    }
    Ok(())
}
