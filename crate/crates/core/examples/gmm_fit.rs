//! Two-component mixture fit on a bimodal sample, then clean flags.
//!
//! `cargo run --example gmm_fit`

use npc_core::detection::{estimate_flags, fit_gmm, posterior_clean, GmmOptions, PerplexityRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Box-Muller draw.
fn normal(rng: &mut impl Rng, mean: f64, sd: f64) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    mean + sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn main() -> npc_core::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // 700 low-perplexity pairs, 300 high.
    let records: Vec<PerplexityRecord> = (0..1000u64)
        .map(|i| {
            let ppl = if i < 700 {
                normal(&mut rng, 0.8, 0.3)
            } else {
                normal(&mut rng, 3.5, 0.8)
            };
            PerplexityRecord {
                pair_id: i,
                ppl: ppl.max(0.0),
            }
        })
        .collect();

    let fit = fit_gmm(&records, &GmmOptions::default())?;
    let k = fit.clean_component;
    println!(
        "clean component {k}: mean {:.3} var {:.3} weight {:.3}",
        fit.means[k], fit.variances[k], fit.weights[k]
    );
    println!(
        "other component:   mean {:.3} var {:.3} weight {:.3}",
        fit.means[1 - k],
        fit.variances[1 - k],
        fit.weights[1 - k]
    );
    println!(
        "EM iterations {}, final mean log-likelihood {:.5}",
        fit.iterations(),
        fit.log_likelihood.last().unwrap()
    );

    for ppl in [0.5, 1.5, 2.0, 2.5, 4.0] {
        println!(
            "  p(clean | ppl = {ppl}) = {:.4}",
            posterior_clean(&fit, ppl)
        );
    }
    let flags = estimate_flags(&fit, &records, 0.5, 0)?;
    let wrong = records
        .iter()
        .filter(|r| flags.is_clean(r.pair_id) != Some(r.pair_id < 700))
        .count();
    println!(
        "{} clean / {} noisy flags, {wrong} disagree with the generating component",
        flags.clean_count(),
        flags.noisy_count()
    );
    Ok(())
}
