//! Baseline vs noise-corrected training across noise ratios.
//!
//! `cargo run --release --example noise_sweep -- [ratios...]`

use std::time::Instant;

use npc_core::data::{generate_synthetic, inject_noise, NoiseSpec, SyntheticConfig};
use npc_core::training::{run, Method, TrainConfig};

fn main() -> npc_core::Result<()> {
    let ratios: Vec<f64> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let ratios = if ratios.is_empty() {
        vec![0.0, 0.2, 0.5]
    } else {
        ratios
    };
    let clean = generate_synthetic(&SyntheticConfig::new(20, 100, 500, 16, 7))?;
    let dev = generate_synthetic(&SyntheticConfig::new(20, 25, 500, 16, 8))?;
    for ratio in ratios {
        let mut train = clean.clone();
        train.pairs = inject_noise(&clean.pairs, &NoiseSpec { ratio, seed: 11 })?;
        let mut row = Vec::new();
        for method in [Method::Baseline, Method::Npc] {
            let cfg = TrainConfig {
                method,
                seed: 3,
                ..TrainConfig::default()
            };
            let t = Instant::now();
            let out = run(&cfg, &train, Some(&dev), None)?;
            let r5: Vec<String> = out
                .metrics
                .iter()
                .map(|m| {
                    format!(
                        "{:.3}",
                        m.dev
                            .as_ref()
                            .and_then(|d| d.recall_at(5))
                            .unwrap_or(f64::NAN)
                    )
                })
                .collect();
            let f1 = out.metrics.last().and_then(|m| m.detection).map(|d| d.f1);
            println!(
                "noise {ratio:.1} {method:?}: R@5 per epoch [{}] final-epoch F1 {f1:?} ({:.1?})",
                r5.join(" "),
                t.elapsed()
            );
            row.push(out.final_dev().and_then(|d| d.recall_at(5)).unwrap_or(0.0));
        }
        println!("noise {ratio:.1}: gap {:+.4}", row[1] - row[0]);
    }
    Ok(())
}
