//! Write a seeded synthetic structure corpus for the CLI pipeline.
//!
//! ```text
//! cargo run --release -p adsorbtext-cli --example make_corpus -- OUT_DIR [N] [SEED]
//! ```
//!
//! Produces `structures.jsonl` and a 70/15/15 split into `train.jsonl`,
//! `val.jsonl`, `test.jsonl`, plus `test_relaxed.jsonl` holding three relaxer
//! variants of each test system.

use std::path::PathBuf;

use adsorbtext::structures::write_structures;
use adsorbtext::synthetic::{relaxer_variants, synthetic_structures};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "corpus".into()));
    let n: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(256);
    let seed: u64 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(0);
    std::fs::create_dir_all(&dir)?;

    let all = synthetic_structures(n, seed)?;
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let (train, rest) = all.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    write_structures(&dir.join("structures.jsonl"), &all)?;
    write_structures(&dir.join("train.jsonl"), train)?;
    write_structures(&dir.join("val.jsonl"), val)?;
    write_structures(&dir.join("test.jsonl"), test)?;
    let relaxed = relaxer_variants(test, &["relaxer-a", "relaxer-b", "relaxer-c"], 0.05, seed);
    write_structures(&dir.join("test_relaxed.jsonl"), &relaxed)?;
    println!(
        "{} structures: {} train, {} val, {} test ({} relaxer variants) in {}",
        n,
        train.len(),
        val.len(),
        test.len(),
        relaxed.len(),
        dir.display()
    );
    Ok(())
}
