//! Trains every channel variant on the default synthetic dataset and prints
//! test metrics per seed.
//!
//! `cargo run --release --example ablation_matrix -- [seeds] [epochs]`

use vbae::eval::{evaluate, EvalSet};
use vbae::ingest::make_split;
use vbae::model::{train, ChannelKind, TrainData, Vbae, VbaeConfig};
use vbae::synthetic::{generate, SyntheticConfig};
use vbae::tensor::AdamConfig;

fn main() -> vbae::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let data = generate(&SyntheticConfig::default())?;

    println!("{:<16} {:>4} {:>8} {:>8} {:>8} {:>8}", "variant", "seed", "R@20", "R@40", "N@100", "PCC");
    for seed in 0..seeds {
        let split = make_split(&data.interactions, seed)?;
        let observed = split.observed_rows(&data.interactions);
        for kind in ChannelKind::ALL {
            let config = VbaeConfig {
                channel: kind,
                epochs,
                batch_size: 50,
                input_dropout: 0.5,
                soft_sigma: 0.7,
                adam: AdamConfig { learning_rate: 0.003, ..AdamConfig::default() },
                seed,
                ..VbaeConfig::default()
            };
            let model = Vbae::new(config, data.interactions.n_items(), data.features.dim())?;
            let td = TrainData {
                interactions: &data.interactions,
                split: &split,
                features: Some(&data.features),
            };
            let out = train(model, td, None)?;
            let set = EvalSet {
                users: &split.test_users,
                observed: &observed,
                heldout: &split.heldout,
                features: Some(&data.features),
            };
            let (report, _) = evaluate(&out.model, set, 256)?;
            let pcc = report.bandwidth.and_then(|b| b.pcc).map_or("-".to_string(), |p| format!("{p:.3}"));
            println!(
                "{:<16} {:>4} {:>8.4} {:>8.4} {:>8.4} {:>8}",
                kind.name(),
                seed,
                report.recall_20,
                report.recall_40,
                report.ndcg_100,
                pcc
            );
        }
    }
    Ok(())
}
