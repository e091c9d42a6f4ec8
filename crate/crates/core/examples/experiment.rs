//! Runs an experiment config end to end and prints the per-variant
//! comparison of the first seed.
//!
//! `cargo run --release --example experiment -- [config.json]`

use std::path::PathBuf;

use vbae::experiment::{compare, run, ExperimentConfig};

fn main() -> vbae::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/quick.json"));
    let config = ExperimentConfig::load(&path)?;
    config.validate()?;

    let outcome = run(&config)?;
    println!("run directory {}", outcome.dir.display());
    println!("{}", serde_json::to_string_pretty(&outcome.aggregate)?);

    let seed = config.seeds[0];
    let reports: Vec<PathBuf> = config
        .variants()
        .iter()
        .map(|v| outcome.dir.join(format!("seed-{seed}/{}/report.json", v.name())))
        .collect();
    if reports.len() >= 2 {
        print!("{}", compare(&reports)?.to_text());
    }
    Ok(())
}
