use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::InteractionMatrix;
use crate::error::{Error, Result};
use crate::stochastic::{NoiseSource, NoiseStream};

/// Fraction of each evaluation user's items kept as observed input.
pub const OBSERVED_FRACTION: f64 = 0.8;

pub const SPLIT_FORMAT: &str = "vbae-split";
pub const SPLIT_VERSION: u32 = 1;

/// User partition and held-out items for one random split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub n_users: usize,
    pub train_users: Vec<usize>,
    pub val_users: Vec<usize>,
    pub test_users: Vec<usize>,
    /// Held-out items of every validation and test user.
    pub heldout: BTreeMap<usize, Vec<usize>>,
}

/// Observed item count for a user with `n` interactions: `round(0.8·n)`,
/// leaving at least one held-out item.
pub fn observed_count(n: usize) -> usize {
    ((OBSERVED_FRACTION * n as f64).round() as usize).clamp(1, n.saturating_sub(1))
}

/// Random 8:1:1 user split; each validation/test user keeps `round(0.8·N)`
/// items as observed input and holds out the rest. Users with a single
/// interaction cannot hold anything out and are moved to training.
pub fn make_split(inter: &InteractionMatrix, seed: u64) -> Result<SplitSpec> {
    let n = inter.n_users();
    if n < 10 {
        return Err(Error::Usage(format!("a split needs at least 10 users, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 / 10.0).round() as usize;
    let n_test = n_val;
    let n_train = n - n_val - n_test;

    let mut train: Vec<usize> = perm[..n_train].to_vec();
    let mut val = Vec::with_capacity(n_val);
    let mut test = Vec::with_capacity(n_test);
    let mut heldout = BTreeMap::new();
    let noise = NoiseSource::new(seed);
    let mut moved = 0usize;
    for (pos, &u) in perm.iter().enumerate().skip(n_train) {
        let row = inter.row(u);
        if row.len() < 2 {
            train.push(u);
            moved += 1;
            continue;
        }
        let mut items = row.to_vec();
        items.shuffle(&mut noise.rng(NoiseStream::Shuffle, u64::MAX, u as u64));
        let mut held = items.split_off(observed_count(row.len()));
        held.sort_unstable();
        heldout.insert(u, held);
        if pos < n_train + n_val {
            val.push(u);
        } else {
            test.push(u);
        }
    }
    if moved > 0 {
        info!("moved {moved} single-interaction evaluation users to the training set");
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitSpec {
        format: SPLIT_FORMAT.into(),
        version: SPLIT_VERSION,
        seed,
        n_users: n,
        train_users: train,
        val_users: val,
        test_users: test,
        heldout,
    })
}

impl SplitSpec {
    /// Rows visible to the model: full rows for training users, observed items
    /// only for validation/test users.
    pub fn observed_rows(&self, inter: &InteractionMatrix) -> Vec<Vec<usize>> {
        inter
            .rows()
            .iter()
            .enumerate()
            .map(|(u, row)| match self.heldout.get(&u) {
                Some(held) => row.iter().copied().filter(|i| held.binary_search(i).is_err()).collect(),
                None => row.clone(),
            })
            .collect()
    }

    pub fn observed_matrix(&self, inter: &InteractionMatrix) -> Result<InteractionMatrix> {
        inter.with_rows(self.observed_rows(inter))
    }

    /// Checks the partition and mask invariants against `inter`.
    pub fn validate(&self, inter: &InteractionMatrix) -> Result<()> {
        if self.n_users != inter.n_users() {
            return Err(Error::dimension("split users", inter.n_users(), self.n_users));
        }
        let mut seen = vec![false; self.n_users];
        for &u in self.train_users.iter().chain(&self.val_users).chain(&self.test_users) {
            if u >= self.n_users || seen[u] {
                return Err(Error::Usage(format!("user {u} is duplicated or out of range")));
            }
            seen[u] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Usage("user sets do not cover every user".into()));
        }
        for &u in self.val_users.iter().chain(&self.test_users) {
            let held = self
                .heldout
                .get(&u)
                .ok_or_else(|| Error::Usage(format!("evaluation user {u} has no held-out set")))?;
            let row = inter.row(u);
            if held.is_empty() || held.iter().any(|i| row.binary_search(i).is_err()) {
                return Err(Error::Usage(format!("held-out items of user {u} are invalid")));
            }
            if row.len() - held.len() != observed_count(row.len()) {
                return Err(Error::Usage(format!("user {u} has the wrong observed count")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_manifest(path: &Path) -> Result<Self> {
        let spec: SplitSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if spec.format != SPLIT_FORMAT || spec.version != SPLIT_VERSION {
            return Err(Error::Usage(format!(
                "{} is not a {SPLIT_FORMAT} v{SPLIT_VERSION} manifest",
                path.display()
            )));
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(sizes: &[usize]) -> InteractionMatrix {
        let n_items = sizes.iter().copied().max().unwrap_or(1);
        InteractionMatrix::from_rows(n_items, sizes.iter().map(|&s| (0..s).collect()).collect())
            .unwrap()
    }

    #[test]
    fn ten_users_split_8_1_1_deterministically() {
        let m = matrix(&[5; 10]);
        let a = make_split(&m, 3).unwrap();
        let b = make_split(&m, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train_users.len(), a.val_users.len(), a.test_users.len()), (8, 1, 1));
        a.validate(&m).unwrap();
    }

    #[test]
    fn observed_counts() {
        assert_eq!(observed_count(10), 8);
        assert_eq!(observed_count(2), 1);
        assert_eq!(observed_count(3), 2);
        assert_eq!(observed_count(5), 4);
        let m = matrix(&[10; 20]);
        let s = make_split(&m, 1).unwrap();
        for u in s.test_users.iter().chain(&s.val_users) {
            assert_eq!(s.heldout[u].len(), 2);
        }
    }

    #[test]
    fn single_interaction_users_go_to_training() {
        let m = matrix(&[1; 12]);
        let s = make_split(&m, 9).unwrap();
        assert!(s.val_users.is_empty() && s.test_users.is_empty());
        assert_eq!(s.train_users.len(), 12);
    }

    #[test]
    fn too_few_users() {
        assert!(make_split(&matrix(&[3; 9]), 0).is_err());
    }

    #[test]
    fn observed_rows_hide_heldout() {
        let m = matrix(&[6; 30]);
        let s = make_split(&m, 5).unwrap();
        let obs = s.observed_rows(&m);
        for (u, held) in &s.heldout {
            assert!(held.iter().all(|i| !obs[*u].contains(i)));
            assert_eq!(obs[*u].len() + held.len(), m.row(*u).len());
        }
        for &u in &s.train_users {
            assert_eq!(obs[u], m.row(u));
        }
    }

    #[test]
    fn seeds_give_distinct_splits() {
        let m = matrix(&[8; 100]);
        let specs: Vec<_> = (0..10).map(|seed| make_split(&m, seed).unwrap()).collect();
        for i in 0..specs.len() {
            for j in i + 1..specs.len() {
                assert_ne!(specs[i].test_users, specs[j].test_users);
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let m = matrix(&[4; 15]);
        let s = make_split(&m, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.json");
        s.write_manifest(&p).unwrap();
        let first = std::fs::read(&p).unwrap();
        assert_eq!(SplitSpec::read_manifest(&p).unwrap(), s);
        make_split(&m, 2).unwrap().write_manifest(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }
}
