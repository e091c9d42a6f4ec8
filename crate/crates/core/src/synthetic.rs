//! Synthetic hybrid-recommendation data with long-tailed user activity and
//! informative but imperfect user features.
//!
//! Items are partitioned into topics, each split into fine groups. A user has
//! a primary group and a few secondary groups. Draws come from the primary
//! group, its topic, the whole catalogue or a secondary group; with a positive
//! `interest_decay` the primary share shrinks as activity grows. Activity follows a Pareto law, so most
//! users are sparse. Features reveal the primary topic and group through
//! indicator columns plus background noise; a fraction of users carry the
//! indicators of a wrong topic.

use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Pareto};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{InteractionMatrix, UserFeatureMatrix};
use crate::stochastic::{NoiseSource, NoiseStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_topics: usize,
    pub groups_per_topic: usize,
    pub items_per_group: usize,
    /// Minimum interactions per user (Pareto scale).
    pub min_activity: usize,
    pub max_activity: usize,
    /// Pareto shape; smaller means a heavier tail.
    pub activity_shape: f64,
    /// Probability that an interaction of a minimally active user comes from
    /// the primary group.
    pub p_group: f64,
    /// Same, for the rest of the primary topic.
    pub p_topic: f64,
    /// Probability of a uniformly random item.
    pub p_uniform: f64,
    pub secondary_groups: usize,
    /// Primary shares scale as `(min_activity / n)^interest_decay`.
    pub interest_decay: f64,
    /// Indicator columns per topic.
    pub features_per_topic: usize,
    /// Indicator columns per group.
    pub features_per_group: usize,
    /// Extra columns carrying only noise.
    pub noise_features: usize,
    /// Probability that an indicator of the user's topic is on.
    pub feature_recall: f64,
    /// Probability that any other column is on.
    pub feature_noise: f64,
    /// Fraction of users whose indicators point to a wrong topic.
    pub misleading_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_topics: 10,
            groups_per_topic: 5,
            items_per_group: 10,
            min_activity: 4,
            max_activity: 150,
            activity_shape: 0.8,
            p_group: 0.5,
            p_topic: 0.3,
            p_uniform: 0.1,
            secondary_groups: 1,
            interest_decay: 0.0,
            features_per_topic: 4,
            features_per_group: 2,
            noise_features: 20,
            feature_recall: 1.0,
            feature_noise: 0.0,
            misleading_fraction: 0.4,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn n_items(&self) -> usize {
        self.n_topics * self.groups_per_topic * self.items_per_group
    }

    pub fn n_features(&self) -> usize {
        self.n_topics * (self.features_per_topic + self.groups_per_topic * self.features_per_group) + self.noise_features
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("synthetic.{field}: {msg}")));
        if self.n_users < 10 {
            return bad("n_users", "must be at least 10");
        }
        if self.n_topics < 2 || self.groups_per_topic == 0 || self.items_per_group == 0 {
            return bad("n_topics", "need at least 2 topics and non-empty groups");
        }
        if self.min_activity < 2 || self.max_activity < self.min_activity {
            return bad("min_activity", "need 2 <= min_activity <= max_activity");
        }
        if self.max_activity > self.n_items() {
            return bad("max_activity", "exceeds the number of items");
        }
        if self.activity_shape <= 0.0 {
            return bad("activity_shape", "must be positive");
        }
        let total = self.p_group + self.p_topic + self.p_uniform;
        if !(0.0..=1.0).contains(&total) || self.p_group < 0.0 || self.p_topic < 0.0 || self.p_uniform < 0.0 {
            return bad("p_group", "p_group + p_topic + p_uniform must lie in [0, 1]");
        }
        if self.secondary_groups == 0 && total < 1.0 {
            return bad("secondary_groups", "needed unless the other shares sum to 1");
        }
        if self.interest_decay < 0.0 {
            return bad("interest_decay", "must be non-negative");
        }
        for (field, p) in [
            ("feature_recall", self.feature_recall),
            ("feature_noise", self.feature_noise),
            ("misleading_fraction", self.misleading_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(field, "must lie in [0, 1]");
            }
        }
        if self.features_per_topic + self.features_per_group == 0 {
            return bad("features_per_topic", "need at least one indicator column");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub interactions: InteractionMatrix,
    pub features: UserFeatureMatrix,
    pub topic: Vec<usize>,
    pub group: Vec<usize>,
    pub misleading: Vec<bool>,
}

/// Generates a dataset; identical configurations give identical data.
pub fn generate(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let source = NoiseSource::new(config.seed);
    let gpt = config.groups_per_topic;
    let ipg = config.items_per_group;
    let n_items = config.n_items();
    let s = config.n_features();
    let pareto = Pareto::new(config.min_activity as f64, config.activity_shape)
        .map_err(|e| Error::Config(format!("synthetic.activity_shape: {e}")))?;

    let mut rows = Vec::with_capacity(config.n_users);
    let mut feats = Vec::with_capacity(config.n_users);
    let (mut topic, mut group, mut misleading) = (Vec::new(), Vec::new(), Vec::new());
    for u in 0..config.n_users {
        let mut rng = source.rng(NoiseStream::Init, 1, u as u64);
        let t = rng.random_range(0..config.n_topics);
        let g = t * gpt + rng.random_range(0..gpt);
        let n = (pareto.sample(&mut rng).floor() as usize).clamp(config.min_activity, config.max_activity);
        let secondary: Vec<usize> = (0..config.secondary_groups)
            .map(|_| rng.random_range(0..config.n_topics * gpt))
            .collect();
        let share = (config.min_activity as f64 / n as f64).powf(config.interest_decay);
        let p_own = config.p_group * share;
        let p_topic = p_own + config.p_topic * share;
        let p_uniform = p_topic + config.p_uniform;
        // Within a group, lower indices are more popular.
        let in_group = |rng: &mut rand_chacha::ChaCha8Rng, g: usize| {
            let k = (rng.random::<f64>().powi(2) * ipg as f64) as usize;
            g * ipg + k.min(ipg - 1)
        };
        let mut items = std::collections::BTreeSet::new();
        let mut draws = 0;
        while items.len() < n {
            draws += 1;
            // Fall back to uniform draws if the reachable groups run out.
            let r: f64 = if draws > 50 * n { p_topic } else { rng.random() };
            let item = if r < p_own {
                in_group(&mut rng, g)
            } else if r < p_topic {
                t * gpt * ipg + rng.random_range(0..gpt * ipg)
            } else if r < p_uniform || secondary.is_empty() {
                rng.random_range(0..n_items)
            } else {
                let h = *secondary.choose(&mut rng).expect("non-empty");
                in_group(&mut rng, h)
            };
            items.insert(item);
        }
        rows.push(items.into_iter().collect::<Vec<_>>());

        let wrong = rng.random::<f64>() < config.misleading_fraction;
        let shown = if wrong {
            let others: Vec<usize> = (0..config.n_topics).filter(|&x| x != t).collect();
            *others.choose(&mut rng).expect("at least two topics")
        } else {
            t
        };
        let shown_group = if wrong { shown * gpt + rng.random_range(0..gpt) } else { g };
        let block = shown * config.features_per_topic..(shown + 1) * config.features_per_topic;
        let group_start = config.n_topics * config.features_per_topic + shown_group * config.features_per_group;
        let group_block = group_start..group_start + config.features_per_group;
        let mut x = Vec::new();
        for c in 0..s {
            let p = if block.contains(&c) || group_block.contains(&c) {
                config.feature_recall
            } else {
                config.feature_noise
            };
            if rng.random::<f64>() < p {
                x.push((c, 0.5 + 0.5 * rng.random::<f64>()));
            }
        }
        feats.push(x);
        topic.push(t);
        group.push(g);
        misleading.push(wrong);
    }
    Ok(SyntheticDataset {
        interactions: InteractionMatrix::from_rows(n_items, rows)?,
        features: UserFeatureMatrix::new(s, feats)?,
        topic,
        group,
        misleading,
    })
}

impl SyntheticDataset {
    /// Writes `interactions.tsv` (`user<TAB>item`) and `user_features.tsv`
    /// (`user<TAB>column<TAB>value`).
    pub fn write_tsv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("interactions.tsv"))?);
        for (u, row) in self.interactions.rows().iter().enumerate() {
            for i in row {
                writeln!(f, "{u}\t{i}")?;
            }
        }
        f.flush()?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("user_features.tsv"))?);
        for u in 0..self.features.n_users() {
            for &(c, v) in self.features.row(u) {
                writeln!(f, "{u}\t{c}\t{v}")?;
            }
        }
        f.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_long_tailed() {
        let c = SyntheticConfig::default();
        let a = generate(&c).unwrap();
        let b = generate(&c).unwrap();
        assert_eq!(a.interactions, b.interactions);
        assert_eq!(a.features, b.features);
        let act = a.interactions.activity();
        let median = {
            let mut s = act.clone();
            s.sort_unstable();
            s[s.len() / 2]
        };
        let max = *act.iter().max().unwrap();
        assert!(act.iter().all(|&n| n >= c.min_activity));
        assert!(max > 10 * median, "median {median}, max {max}");
        let wrong = a.misleading.iter().filter(|&&m| m).count();
        assert!((300..500).contains(&wrong), "{wrong}");
    }
}
