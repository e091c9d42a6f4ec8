//! Configuration-driven experiments: dataset preparation, the per-seed
//! train/select/evaluate protocol, run directories and report comparison.
//!
//! An experiment is one JSON document ([`ExperimentConfig`]). [`run`] trains
//! every `(seed, variant)` cell, keeps the parameters with the best validation
//! NDCG@100, evaluates them on the test users and aggregates across seeds.

mod compare;
mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{
    density_stats, load_interactions, load_item_tokens, load_user_features, DensityStats, InteractionMatrix,
    ItemFeatures, SplitSpec, UserFeatureMatrix,
};
use crate::model::{ChannelKind, VbaeConfig};
use crate::synthetic::{generate, SyntheticConfig};

pub use compare::{compare, load_rows, ComparisonRow, ComparisonTable};
pub use run::{
    evaluate_cell, run, train_cell, Aggregate, CellSummary, MeanStd, RunOutcome, SeedResult, VariantAggregate,
    AGGREGATE_FORMAT,
};

pub const SCHEMA_VERSION: u32 = 1;

const DEFAULT_VOCAB_SIZE: usize = 8000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: VbaeConfig,
    /// Split seeds; each gives one train/validation/test partition.
    pub seeds: Vec<u64>,
    /// Channel variants to train. Empty means `model.channel` alone.
    #[serde(default)]
    pub variants: Vec<ChannelKind>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetConfig {
    Files(FileDataset),
    Synthetic(SyntheticConfig),
}

/// Interaction file plus at most one feature source: raw item token counts
/// (turned into per-user profiles from each split's observed items) or a
/// precomputed user feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDataset {
    pub interactions: PathBuf,
    #[serde(default)]
    pub item_tokens: Option<PathBuf>,
    #[serde(default)]
    pub user_features: Option<PathBuf>,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_min_visits")]
    pub min_visits: usize,
}

fn default_vocab_size() -> usize {
    DEFAULT_VOCAB_SIZE
}

fn default_min_visits() -> usize {
    1
}

impl ExperimentConfig {
    /// Reads and validates a config file. Relative dataset and output paths
    /// are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output_dir);
        if let DatasetConfig::Files(f) = &mut self.dataset {
            join(&mut f.interactions);
            f.item_tokens.as_mut().map(join);
            f.user_features.as_mut().map(join);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: need at least one split seed".into()));
        }
        if has_duplicates(&self.seeds) {
            return Err(Error::Config("seeds: duplicate seed".into()));
        }
        if has_duplicates(&self.variants) {
            return Err(Error::Config("variants: duplicate variant".into()));
        }
        for kind in self.variants() {
            self.model_config(kind, self.seeds[0]).validate()?;
        }
        let has_features = match &self.dataset {
            DatasetConfig::Synthetic(s) => {
                s.validate()?;
                true
            }
            DatasetConfig::Files(f) => {
                if !f.interactions.is_file() {
                    return Err(Error::Config(format!(
                        "dataset.interactions: no such file {}",
                        f.interactions.display()
                    )));
                }
                for (field, p) in [("item_tokens", &f.item_tokens), ("user_features", &f.user_features)] {
                    if let Some(p) = p {
                        if !p.is_file() {
                            return Err(Error::Config(format!("dataset.{field}: no such file {}", p.display())));
                        }
                    }
                }
                if f.item_tokens.is_some() && f.user_features.is_some() {
                    return Err(Error::Config(
                        "dataset: give either item_tokens or user_features, not both".into(),
                    ));
                }
                if f.vocab_size == 0 {
                    return Err(Error::Config("dataset.vocab_size: must be positive".into()));
                }
                f.item_tokens.is_some() || f.user_features.is_some()
            }
        };
        if !has_features {
            if let Some(kind) = self.variants().into_iter().find(|k| needs_features(*k)) {
                return Err(Error::Config(format!("variants: `{kind}` needs a feature source in dataset")));
            }
        }
        Ok(())
    }

    /// The variants to train, in config order.
    pub fn variants(&self) -> Vec<ChannelKind> {
        if self.variants.is_empty() {
            vec![self.model.channel]
        } else {
            self.variants.clone()
        }
    }

    /// Model configuration of one cell. The model seed combines the configured
    /// seed with the split seed.
    pub fn model_config(&self, kind: ChannelKind, seed: u64) -> VbaeConfig {
        VbaeConfig {
            channel: kind,
            seed: self.model.seed.wrapping_add(seed),
            ..self.model.clone()
        }
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let digest = Sha256::digest(serde_json::to_vec(&canonical)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn has_duplicates<T: PartialEq>(xs: &[T]) -> bool {
    xs.iter().enumerate().any(|(i, x)| xs[..i].contains(x))
}

fn needs_features(kind: ChannelKind) -> bool {
    kind.is_fused() || kind == ChannelKind::ConcatBaseline
}

/// A loaded dataset and its feature source.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub interactions: InteractionMatrix,
    features: FeatureSource,
}

#[derive(Debug, Clone)]
enum FeatureSource {
    None,
    /// User-level features that do not depend on the split.
    Fixed(UserFeatureMatrix),
    /// Profiles built from each user's observed items.
    Items(ItemFeatures),
}

impl Dataset {
    pub fn load(config: &DatasetConfig) -> Result<Self> {
        match config {
            DatasetConfig::Synthetic(s) => {
                let data = generate(s)?;
                Ok(Self {
                    interactions: data.interactions,
                    features: FeatureSource::Fixed(data.features),
                })
            }
            DatasetConfig::Files(f) => {
                let interactions = load_interactions(&f.interactions, f.min_visits)?;
                let features = if let Some(p) = &f.item_tokens {
                    let tokens = load_item_tokens(p, &interactions)?;
                    FeatureSource::Items(ItemFeatures::build(&tokens, f.vocab_size))
                } else if let Some(p) = &f.user_features {
                    FeatureSource::Fixed(load_user_features(p, &interactions, None)?)
                } else {
                    FeatureSource::None
                };
                Ok(Self { interactions, features })
            }
        }
    }

    /// Feature width, or 1 when there are no features.
    pub fn feature_dim(&self) -> usize {
        match &self.features {
            FeatureSource::None => 1,
            FeatureSource::Fixed(f) => f.dim(),
            FeatureSource::Items(f) => f.dim(),
        }
    }

    /// User features for one split. Item-derived profiles only see the
    /// observed items of validation and test users.
    pub fn features_for(&self, split: &SplitSpec) -> Option<UserFeatureMatrix> {
        match &self.features {
            FeatureSource::None => None,
            FeatureSource::Fixed(f) => Some(f.clone()),
            FeatureSource::Items(f) => Some(f.user_features(&split.observed_rows(&self.interactions))),
        }
    }

    pub fn stats(&self) -> DensityStats {
        density_stats(&self.interactions)
    }
}
