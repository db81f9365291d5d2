//! Writes the synthetic corpus as episode files:
//! `train.json` (source domains) and `test-<k>shot.json` (target domains).
//!
//!     cargo run --example synth -- out/dir [seed]

use std::path::PathBuf;

use fewshot_nlu::data::save_episodes;
use fewshot_nlu::synthetic::{generate, SyntheticConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "synthetic".into()));
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    std::fs::create_dir_all(&dir)?;
    let corpus = generate(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    });
    save_episodes(dir.join("train.json"), &corpus.train)?;
    for (shots, eps) in &corpus.test {
        save_episodes(dir.join(format!("test-{shots}shot.json")), eps)?;
    }
    println!(
        "wrote {} training and {} test episode sets to {}",
        corpus.train.len(),
        corpus.test.len(),
        dir.display()
    );
    Ok(())
}
