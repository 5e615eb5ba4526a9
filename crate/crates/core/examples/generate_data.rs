//! Generate a synthetic corpus, inject mismatched pairs and write JSONL.
//!
//! `cargo run --example generate_data -- [out_dir]`

use std::path::PathBuf;

use npc_core::data::{
    generate_synthetic, inject_noise, write_collection, write_pairs, NoiseSpec, SyntheticConfig,
    SyntheticLayout,
};

fn main() -> npc_core::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "synthetic".into()),
    );
    std::fs::create_dir_all(&out)?;

    let cfg = SyntheticConfig::new(20, 100, 500, 16, 7);
    let ds = generate_synthetic(&cfg)?;
    let layout = SyntheticLayout::new(cfg.num_topics, cfg.vocab_size)?;
    println!(
        "{} pairs, {} documents, {} tokens per topic block",
        ds.pairs.len(),
        ds.collection.len(),
        layout.block_size
    );

    let noisy = inject_noise(
        &ds.pairs,
        &NoiseSpec {
            ratio: 0.3,
            seed: 11,
        },
    )?;
    let corrupted: Vec<_> = noisy
        .iter()
        .filter(|p| p.truth_clean == Some(false))
        .collect();
    println!("{} pairs corrupted", corrupted.len());
    if let Some(p) = corrupted.first() {
        let original = &ds.pairs[p.pair_id as usize];
        println!("  {}: {} -> {}", p.query_id, original.doc_id, p.doc_id);
    }

    write_pairs(&out.join("pairs.jsonl"), &noisy)?;
    write_collection(&out.join("collection.jsonl"), &ds.collection)?;
    println!("wrote {}", out.display());
    Ok(())
}
