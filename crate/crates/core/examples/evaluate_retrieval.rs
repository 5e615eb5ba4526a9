//! Train briefly, then exact top-k retrieval with Recall@k and MRR on a
//! held-out split.
//!
//! `cargo run --release --example evaluate_retrieval`

use npc_core::data::{generate_synthetic, SyntheticConfig};
use npc_core::evaluation::{retrieve, MetricsReport};
use npc_core::training::{run, Method, TrainConfig};

fn main() -> npc_core::Result<()> {
    let train = generate_synthetic(&SyntheticConfig::new(20, 100, 500, 16, 7))?;
    let dev = generate_synthetic(&SyntheticConfig::new(20, 25, 500, 16, 8))?;
    let cfg = TrainConfig {
        method: Method::Baseline,
        warmup_epochs: 3,
        total_epochs: 3,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = run(&cfg, &train, None, None)?;

    let queries: Vec<(String, String)> = dev
        .pairs
        .iter()
        .map(|p| (p.query_id.clone(), p.query_text.clone()))
        .collect();
    let ranked = retrieve(
        &out.params,
        &out.vocab,
        &queries,
        &dev.collection,
        100,
        cfg.similarity,
    )?;
    let report = MetricsReport::compute(&ranked, &dev.gold(), &[1, 5, 20, 100])?;
    for r in &report.recall {
        println!("Recall@{:<3} {:.3}", r.k, r.value);
    }
    println!(
        "MRR        {:.3}  ({} queries, {} documents)",
        report.mrr,
        report.queries,
        dev.collection.len()
    );

    let (qid, list) = ranked.results.iter().next().unwrap();
    println!("top 3 for {qid} (gold {}):", dev.gold()[qid]);
    for (doc, score) in list.iter().take(3) {
        println!("  {doc} {score:.4}");
    }
    Ok(())
}
