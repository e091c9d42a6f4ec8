//! Loads interaction and feature files, prints dataset statistics and a
//! seeded split.
//!
//! `cargo run --example ingest -- [dir]` reads `interactions.tsv` and
//! `user_features.tsv` from `dir`; without it a small synthetic dataset is
//! written to a temporary directory first.

use std::path::PathBuf;

use vbae::ingest::{density_stats, load_interactions, load_user_features, make_split};
use vbae::synthetic::{generate, SyntheticConfig};

fn main() -> vbae::Result<()> {
    let tmp = tempfile::tempdir()?;
    let dir = match std::env::args().nth(1) {
        Some(d) => PathBuf::from(d),
        None => {
            let data = generate(&SyntheticConfig { n_users: 200, ..SyntheticConfig::default() })?;
            data.write_tsv(tmp.path())?;
            tmp.path().to_path_buf()
        }
    };

    let inter = load_interactions(dir.join("interactions.tsv"), 1)?;
    let stats = density_stats(&inter);
    println!("{}", serde_json::to_string_pretty(&stats)?);

    let features = load_user_features(dir.join("user_features.tsv"), &inter, None)?;
    println!("feature dim {}", features.dim());

    let split = make_split(&inter, 0)?;
    split.validate(&inter)?;
    let held: usize = split.heldout.values().map(Vec::len).sum();
    println!(
        "split: {} train, {} validation, {} test users; {held} held-out interactions",
        split.train_users.len(),
        split.val_users.len(),
        split.test_users.len()
    );
    Ok(())
}
