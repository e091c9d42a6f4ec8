use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use vbae::eval::write_user_csv;
use vbae::experiment::{compare, evaluate_cell, run, train_cell, Dataset, ExperimentConfig};
use vbae::ingest::{make_split, SplitSpec};
use vbae::model::{ChannelKind, Vbae};
use vbae::{Error, Result};

#[derive(Parser)]
#[command(name = "vbae", version, about = "Variational bandwidth auto-encoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset, write its summary, index maps and split manifests.
    Ingest(Common),
    /// Train models per seed and variant without evaluating on test users.
    Train(Common),
    /// Evaluate a saved model on the test users of a split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model directory written by `train` or `run`.
        #[arg(long)]
        model: PathBuf,
        /// Split seed the model was trained on.
        #[arg(long)]
        seed: u64,
    },
    /// Train, select and evaluate every cell, then aggregate across seeds.
    Run(Common),
    /// Tabulate test reports or run aggregates.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Directory for comparison.txt and comparison.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated split seeds; override `seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated channel variants; override `variants`.
    #[arg(long, value_delimiter = ',')]
    variant: Option<Vec<ChannelKind>>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Usage(format!("--threads: {e}")))?;
        }
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(seeds) = &self.seeds {
            config.seeds = seeds.clone();
        }
        if let Some(v) = &self.variant {
            config.variants = v.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn ingest(config: &ExperimentConfig) -> Result<()> {
    let dataset = Dataset::load(&config.dataset)?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;
    let stats = dataset.stats();
    write(&out.join("dataset.json"), &serde_json::to_string_pretty(&stats)?)?;
    dataset.interactions.write_index_maps(out)?;
    for &seed in &config.seeds {
        make_split(&dataset.interactions, seed)?.write_manifest(&out.join(format!("split-{seed}.json")))?;
    }
    println!(
        "{} users, {} items, {} interactions, density {:.5}",
        stats.n_users, stats.n_items, stats.n_interactions, stats.density
    );
    Ok(())
}

fn train_all(config: &ExperimentConfig) -> Result<()> {
    let dataset = Dataset::load(&config.dataset)?;
    for &seed in &config.seeds {
        let split = make_split(&dataset.interactions, seed)?;
        let features = dataset.features_for(&split);
        let seed_dir = config.output_dir.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&seed_dir)?;
        split.write_manifest(&seed_dir.join("split.json"))?;
        for kind in config.variants() {
            let dir = seed_dir.join(kind.name());
            std::fs::create_dir_all(&dir)?;
            let outcome = train_cell(
                config.model_config(kind, seed),
                &dataset,
                &split,
                features.as_ref(),
                Some(&dir.join("history.jsonl")),
            )?;
            outcome.model.save(&dir.join("model"))?;
            println!(
                "seed {seed} {kind}: best epoch {:?}, validation NDCG@100 {:?}",
                outcome.best_epoch, outcome.best_val_ndcg
            );
        }
    }
    Ok(())
}

fn eval_model(config: &ExperimentConfig, model_dir: &Path, seed: u64) -> Result<()> {
    let dataset = Dataset::load(&config.dataset)?;
    let model = Vbae::load(model_dir)?;
    let stored = model_dir.parent().and_then(Path::parent).map(|d| d.join("split.json"));
    let split = match stored {
        Some(p) if p.is_file() => SplitSpec::read_manifest(&p)?,
        _ => make_split(&dataset.interactions, seed)?,
    };
    if split.seed != seed {
        return Err(Error::Usage(format!("--seed {seed} does not match the stored split seed {}", split.seed)));
    }
    let features = dataset.features_for(&split);
    let (report, users) = evaluate_cell(&model, &dataset, &split, features.as_ref())?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;
    report.write_json(&out.join("report.json"))?;
    write_user_csv(&users, &out.join("users.csv"))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(c) => ingest(&c.load()?),
        Command::Train(c) => train_all(&c.load()?),
        Command::Eval { common, model, seed } => eval_model(&common.load()?, &model, seed),
        Command::Run(c) => {
            let outcome = run(&c.load()?)?;
            info!("finished {}", outcome.dir.display());
            for v in &outcome.aggregate.variants {
                println!(
                    "{:<16} Recall@20 {:.4} ± {:.4}  NDCG@100 {:.4} ± {:.4}",
                    v.variant.name(),
                    v.recall_20.mean,
                    v.recall_20.std,
                    v.ndcg_100.mean,
                    v.ndcg_100.std
                );
            }
            println!("{}", outcome.dir.display());
            Ok(())
        }
        Command::Compare { reports, out } => {
            let table = compare(&reports)?;
            print!("{}", table.to_text());
            if let Some(dir) = out {
                write(&dir.join("comparison.txt"), &table.to_text())?;
                write(&dir.join("comparison.csv"), &table.to_csv())?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
