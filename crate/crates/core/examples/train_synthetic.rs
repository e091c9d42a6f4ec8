//! Trains the soft-channel model on synthetic data and shows how the inferred
//! bandwidth tracks user activity.
//!
//! `cargo run --release --example train_synthetic -- [epochs]`

use vbae::eval::{evaluate, EvalSet};
use vbae::ingest::make_split;
use vbae::model::{train, TrainData, Vbae, VbaeConfig};
use vbae::synthetic::{generate, SyntheticConfig};
use vbae::tensor::AdamConfig;

fn main() -> vbae::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let data = generate(&SyntheticConfig::default())?;
    let split = make_split(&data.interactions, 0)?;
    let config = VbaeConfig {
        epochs,
        batch_size: 50,
        input_dropout: 0.5,
        soft_sigma: 0.7,
        adam: AdamConfig { learning_rate: 0.003, ..AdamConfig::default() },
        ..VbaeConfig::default()
    };
    let model = Vbae::new(config, data.interactions.n_items(), data.features.dim())?;
    let out = train(
        model,
        TrainData { interactions: &data.interactions, split: &split, features: Some(&data.features) },
        None,
    )?;
    for r in &out.history {
        println!("{}", serde_json::to_string(r)?);
    }

    let observed = split.observed_rows(&data.interactions);
    let set = EvalSet {
        users: &split.test_users,
        observed: &observed,
        heldout: &split.heldout,
        features: Some(&data.features),
    };
    let (report, mut users) = evaluate(&out.model, set, 256)?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    users.sort_by_key(|u| u.n_int);
    println!("{:>10} {:>10} {:>8} {:>8}", "activity", "users", "alpha", "ndcg");
    for chunk in users.chunks(users.len().div_ceil(4)) {
        let n = chunk.len() as f64;
        let alpha = chunk.iter().filter_map(|u| u.alpha).sum::<f64>() / n;
        let ndcg = chunk.iter().map(|u| u.ndcg_100).sum::<f64>() / n;
        let span = format!("{}-{}", chunk[0].n_int, chunk[chunk.len() - 1].n_int);
        println!("{span:>10} {:>10} {alpha:>8.3} {ndcg:>8.4}", chunk.len());
    }
    Ok(())
}
