use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, ExperimentConfig, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_user_csv, EvalReport, EvalSet, UserMetrics};
use crate::ingest::{make_split, SplitSpec, UserFeatureMatrix};
use crate::model::{train, ChannelKind, TrainData, TrainOutcome, Vbae, VbaeConfig};

pub const AGGREGATE_FORMAT: &str = "vbae-aggregate";

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

/// Test metrics of one `(seed, variant)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub recall_20: f64,
    pub recall_40: f64,
    pub ndcg_100: f64,
    pub bandwidth_mean: Option<f64>,
    pub bandwidth_std: Option<f64>,
    pub pcc: Option<f64>,
}

impl SeedResult {
    fn new(seed: u64, r: &EvalReport) -> Self {
        Self {
            seed,
            recall_20: r.recall_20,
            recall_40: r.recall_40,
            ndcg_100: r.ndcg_100,
            bandwidth_mean: r.bandwidth.as_ref().map(|b| b.mean),
            bandwidth_std: r.bandwidth.as_ref().map(|b| b.std),
            pcc: r.bandwidth.as_ref().and_then(|b| b.pcc),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAggregate {
    pub variant: ChannelKind,
    pub n_seeds: usize,
    pub recall_20: MeanStd,
    pub recall_40: MeanStd,
    pub ndcg_100: MeanStd,
    pub bandwidth_mean: Option<MeanStd>,
    pub bandwidth_std: Option<MeanStd>,
    pub pcc: Option<MeanStd>,
    pub per_seed: Vec<SeedResult>,
}

impl VariantAggregate {
    pub fn from_seeds(variant: ChannelKind, per_seed: Vec<SeedResult>) -> Result<Self> {
        let col = |f: fn(&SeedResult) -> f64| MeanStd::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        let opt = |f: fn(&SeedResult) -> Option<f64>| {
            per_seed.iter().map(f).collect::<Option<Vec<_>>>().and_then(|v| MeanStd::of(&v))
        };
        let empty = || Error::Report(format!("no seeds for variant {variant}"));
        Ok(Self {
            variant,
            n_seeds: per_seed.len(),
            recall_20: col(|s| s.recall_20).ok_or_else(empty)?,
            recall_40: col(|s| s.recall_40).ok_or_else(empty)?,
            ndcg_100: col(|s| s.ndcg_100).ok_or_else(empty)?,
            bandwidth_mean: opt(|s| s.bandwidth_mean),
            bandwidth_std: opt(|s| s.bandwidth_std),
            pcc: opt(|s| s.pcc),
            per_seed,
        })
    }
}

/// Cross-seed summary of a run. Contains no timestamps or paths, so equal
/// configurations give byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub format: String,
    pub schema_version: u32,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantAggregate>,
}

impl Aggregate {
    pub fn variant(&self, kind: ChannelKind) -> Option<&VariantAggregate> {
        self.variants.iter().find(|v| v.variant == kind)
    }
}

/// Contents of each cell's `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub seed: u64,
    pub variant: ChannelKind,
    pub model_seed: u64,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_ndcg_100: Option<f64>,
    pub train_secs: f64,
    pub test: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    status: String,
    config_sha256: String,
    code_version: String,
    seeds: Vec<u64>,
    variants: Vec<ChannelKind>,
    tags: Vec<String>,
    started_at: String,
    finished_at: Option<String>,
    wall_clock_secs: Option<f64>,
    error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub aggregate: Aggregate,
}

/// Builds and trains one model. `history` receives one JSON line per epoch.
pub fn train_cell(
    config: VbaeConfig,
    dataset: &Dataset,
    split: &SplitSpec,
    features: Option<&UserFeatureMatrix>,
    history: Option<&Path>,
) -> Result<TrainOutcome> {
    let model = Vbae::new(config, dataset.interactions.n_items(), dataset.feature_dim())?;
    let data = TrainData {
        interactions: &dataset.interactions,
        split,
        features,
    };
    train(model, data, history)
}

/// Scores the test users of `split`.
pub fn evaluate_cell(
    model: &Vbae,
    dataset: &Dataset,
    split: &SplitSpec,
    features: Option<&UserFeatureMatrix>,
) -> Result<(EvalReport, Vec<UserMetrics>)> {
    split.validate(&dataset.interactions)?;
    let observed = split.observed_rows(&dataset.interactions);
    let set = EvalSet {
        users: &split.test_users,
        observed: &observed,
        heldout: &split.heldout,
        features,
    };
    evaluate(model, set, EVAL_BATCH)
}

fn now() -> chrono::DateTime<chrono::Utc> {
    chrono::Utc::now()
}

fn create_run_dir(root: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    let stamp = now().format("run-%Y%m%dT%H%M%SZ").to_string();
    let mut dir = root.join(&stamp);
    let mut k = 1;
    while dir.exists() {
        k += 1;
        dir = root.join(format!("{stamp}-{k}"));
    }
    std::fs::create_dir(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Runs every `(seed, variant)` cell of `config` under a fresh
/// `run-<UTC time>` directory of `config.output_dir`.
///
/// On failure the manifest is marked `failed`, a `FAILED` file holds the
/// error and the error is returned.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let started = now();
    let clock = Instant::now();
    let dir = create_run_dir(&config.output_dir)?;
    info!("run directory {}", dir.display());
    let mut manifest = RunManifest {
        status: "running".into(),
        config_sha256: config.hash()?,
        code_version: env!("CARGO_PKG_VERSION").into(),
        seeds: config.seeds.clone(),
        variants: config.variants(),
        tags: config.tags.clone(),
        started_at: started.to_rfc3339(),
        finished_at: None,
        wall_clock_secs: None,
        error: None,
    };
    write_json(&dir.join("config.json"), config)?;
    write_json(&dir.join("manifest.json"), &manifest)?;

    let result = run_cells(config, &dir, &manifest.config_sha256);
    manifest.finished_at = Some(now().to_rfc3339());
    manifest.wall_clock_secs = Some(clock.elapsed().as_secs_f64());
    match result {
        Ok(aggregate) => {
            manifest.status = "completed".into();
            write_json(&dir.join("manifest.json"), &manifest)?;
            Ok(RunOutcome { dir, aggregate })
        }
        Err(e) => {
            warn!("run failed: {e}");
            manifest.status = "failed".into();
            manifest.error = Some(e.to_string());
            // The original error matters more than a failure to record it.
            let _ = write_json(&dir.join("manifest.json"), &manifest);
            let _ = std::fs::write(dir.join("FAILED"), format!("{e}\n"));
            Err(e)
        }
    }
}

fn run_cells(config: &ExperimentConfig, dir: &Path, config_hash: &str) -> Result<Aggregate> {
    let dataset = Dataset::load(&config.dataset)?;
    write_json(&dir.join("dataset.json"), &dataset.stats())?;

    let mut splits = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let split = make_split(&dataset.interactions, seed)?;
        let seed_dir = dir.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&seed_dir)?;
        split.write_manifest(&seed_dir.join("split.json"))?;
        let features = dataset.features_for(&split);
        splits.push((seed, split, features));
    }

    let variants = config.variants();
    let cells: Vec<(usize, ChannelKind)> = (0..splits.len())
        .flat_map(|s| variants.iter().map(move |&k| (s, k)))
        .collect();
    let summaries: Vec<Result<CellSummary>> = cells
        .par_iter()
        .map(|&(s, kind)| {
            let (seed, split, features) = &splits[s];
            let cell_dir = dir.join(format!("seed-{seed}")).join(kind.name());
            run_cell(config, &dataset, *seed, kind, split, features.as_ref(), &cell_dir)
        })
        .collect();
    let summaries = summaries.into_iter().collect::<Result<Vec<_>>>()?;

    let mut aggregated = Vec::with_capacity(variants.len());
    for &kind in &variants {
        let per_seed = summaries
            .iter()
            .filter(|c| c.variant == kind)
            .map(|c| SeedResult::new(c.seed, &c.test))
            .collect();
        aggregated.push(VariantAggregate::from_seeds(kind, per_seed)?);
    }
    let aggregate = Aggregate {
        format: AGGREGATE_FORMAT.into(),
        schema_version: SCHEMA_VERSION,
        config_sha256: config_hash.into(),
        seeds: config.seeds.clone(),
        variants: aggregated,
    };
    write_json(&dir.join("aggregate.json"), &aggregate)?;
    Ok(aggregate)
}

fn run_cell(
    config: &ExperimentConfig,
    dataset: &Dataset,
    seed: u64,
    kind: ChannelKind,
    split: &SplitSpec,
    features: Option<&UserFeatureMatrix>,
    dir: &Path,
) -> Result<CellSummary> {
    std::fs::create_dir_all(dir)?;
    let model_config = config.model_config(kind, seed);
    let model_seed = model_config.seed;
    let clock = Instant::now();
    let outcome = train_cell(model_config, dataset, split, features, Some(&dir.join("history.jsonl")))?;
    let train_secs = clock.elapsed().as_secs_f64();
    outcome.model.save(&dir.join("model"))?;
    let (report, users) = evaluate_cell(&outcome.model, dataset, split, features)?;
    report.write_json(&dir.join("report.json"))?;
    write_user_csv(&users, &dir.join("users.csv"))?;
    info!("seed {seed} {kind}: test NDCG@100 {:.4}", report.ndcg_100);
    let summary = CellSummary {
        seed,
        variant: kind,
        model_seed,
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_ndcg_100: outcome.best_val_ndcg,
        train_secs,
        test: report,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_uses_sample_deviation() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 1.0).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[4.0]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn optional_columns_need_every_seed() {
        let s = |seed, pcc: Option<f64>| SeedResult {
            seed,
            recall_20: 0.1,
            recall_40: 0.2,
            ndcg_100: 0.3,
            bandwidth_mean: pcc.map(|_| 0.5),
            bandwidth_std: pcc.map(|_| 0.1),
            pcc,
        };
        let a = VariantAggregate::from_seeds(ChannelKind::Soft, vec![s(0, Some(-0.5)), s(1, Some(-0.7))]).unwrap();
        assert!((a.pcc.unwrap().mean + 0.6).abs() < 1e-12);
        let b = VariantAggregate::from_seeds(ChannelKind::Soft, vec![s(0, Some(-0.5)), s(1, None)]).unwrap();
        assert!(b.pcc.is_none());
        assert!(VariantAggregate::from_seeds(ChannelKind::Soft, Vec::new()).is_err());
    }
}
