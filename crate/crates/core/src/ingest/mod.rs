//! Data ingestion: interaction and token-count files, user profiles, random
//! splits and dataset summaries.
//!
//! All operations are pure functions of their inputs (and seed), so repeated
//! runs produce identical matrices and manifests.

mod features;
mod interactions;
mod split;

use serde::{Deserialize, Serialize};

pub use features::{
    build_user_features, load_item_tokens, load_user_features, smooth_idf, ItemFeatures, ItemTokenCounts,
    UserFeatureMatrix,
};
pub use interactions::{load_interactions, InteractionMatrix};
pub use split::{make_split, observed_count, SplitSpec, OBSERVED_FRACTION};

/// Per-user activity summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub density: f64,
    pub max_visits: usize,
    pub min_visits: usize,
    pub mean_visits: f64,
    /// Population standard deviation of the per-user counts.
    pub std_visits: f64,
}

pub fn density_stats(inter: &InteractionMatrix) -> DensityStats {
    let counts = inter.activity();
    let n = counts.len().max(1) as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    let var = counts
        .iter()
        .map(|&c| (c as f64 - mean) * (c as f64 - mean))
        .sum::<f64>()
        / n;
    DensityStats {
        n_users: inter.n_users(),
        n_items: inter.n_items(),
        n_interactions: inter.n_interactions(),
        density: inter.density(),
        max_visits: counts.iter().copied().max().unwrap_or(0),
        min_visits: counts.iter().copied().min().unwrap_or(0),
        mean_visits: mean,
        std_visits: var.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_two_rows() {
        let m = InteractionMatrix::from_rows(4, vec![vec![0], vec![1, 2, 3]]).unwrap();
        let s = density_stats(&m);
        assert_eq!((s.max_visits, s.min_visits), (3, 1));
        assert_eq!(s.mean_visits, 2.0);
        assert_eq!(s.std_visits, 1.0);
        assert_eq!(s.density, 0.5);
    }
}
