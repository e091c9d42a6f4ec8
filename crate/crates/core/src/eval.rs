//! Ranking metrics, activity-quartile breakdowns and bandwidth statistics.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::UserFeatureMatrix;
use crate::model::Vbae;

/// Largest cutoff used by the standard report.
pub const MAX_CUTOFF: usize = 100;

/// Top items for one user together with the held-out relevant set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    pub user: usize,
    pub ranked_items: Vec<usize>,
    /// Sorted held-out items.
    pub heldout: Vec<usize>,
}

impl RankedList {
    fn hits(&self, m: usize) -> impl Iterator<Item = bool> + '_ {
        self.ranked_items
            .iter()
            .take(m)
            .map(|i| self.heldout.binary_search(i).is_ok())
    }
}

/// Indices of the `m` highest scores, excluding the sorted `exclude` items.
/// Ties are broken by ascending item index.
pub fn rank_items(scores: ArrayView1<f64>, exclude: &[usize], m: usize) -> Vec<usize> {
    let order = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut items: Vec<usize> = (0..scores.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    if m < items.len() {
        items.select_nth_unstable_by(m, order);
        items.truncate(m);
    }
    items.sort_unstable_by(order);
    items
}

/// Hits in the top `m` divided by `min(m, |I_u|)`; `None` for an empty
/// held-out set.
pub fn recall_at_m(list: &RankedList, m: usize) -> Option<f64> {
    if list.heldout.is_empty() || m == 0 {
        return None;
    }
    let hits = list.hits(m).filter(|&h| h).count();
    Some(hits as f64 / m.min(list.heldout.len()) as f64)
}

fn ndcg_with_discount(list: &RankedList, m: usize, discount: impl Fn(usize) -> f64) -> Option<f64> {
    if list.heldout.is_empty() || m == 0 {
        return None;
    }
    let dcg: f64 = list
        .hits(m)
        .enumerate()
        .filter(|&(_, h)| h)
        .fold(0.0, |acc, (r, _)| acc + discount(r + 1));
    let idcg: f64 = (1..=m.min(list.heldout.len())).map(&discount).sum();
    Some(dcg / idcg)
}

/// NDCG with an explicit logarithm base. The base cancels in the ratio.
pub fn ndcg_at_m_with_base(list: &RankedList, m: usize, base: f64) -> Option<f64> {
    ndcg_with_discount(list, m, |rank| 1.0 / ((rank + 1) as f64).log(base))
}

/// `DCG@m / IDCG@m` with a `1/log₂(r + 1)` discount.
pub fn ndcg_at_m(list: &RankedList, m: usize) -> Option<f64> {
    ndcg_with_discount(list, m, |rank| 1.0 / ((rank + 1) as f64).log2())
}

/// Mean of `values` in four equal-size groups of users ordered by activity,
/// ties broken by position. Group `q` spans positions `⌊q·n/4⌋..⌊(q+1)·n/4⌋`.
pub fn quartile_breakdown(values: &[f64], activity: &[usize]) -> Result<[f64; 4]> {
    if values.len() != activity.len() {
        return Err(Error::dimension("quartile inputs", values.len(), activity.len()));
    }
    let n = values.len();
    if n < 4 {
        return Err(Error::Usage(format!("quartiles need at least 4 users, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (activity[i], i));
    let mut out = [0.0; 4];
    for (q, slot) in out.iter_mut().enumerate() {
        let group = &order[q * n / 4..(q + 1) * n / 4];
        *slot = group.iter().map(|&i| values[i]).sum::<f64>() / group.len() as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthStats {
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
    /// Pearson correlation with the interaction count; `None` when either
    /// side is constant.
    pub pcc: Option<f64>,
}

/// Pearson correlation, `None` if either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn bandwidth_stats(alpha: &[f64], activity: &[usize]) -> Result<BandwidthStats> {
    if alpha.len() != activity.len() {
        return Err(Error::dimension("bandwidth inputs", alpha.len(), activity.len()));
    }
    if alpha.len() < 2 {
        return Err(Error::Usage("bandwidth statistics need at least 2 users".into()));
    }
    let n = alpha.len() as f64;
    let mean = alpha.iter().sum::<f64>() / n;
    let var = alpha.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
    let counts: Vec<f64> = activity.iter().map(|&c| c as f64).collect();
    let pcc = pearson(alpha, &counts);
    if pcc.is_none() {
        warn!("bandwidth or activity is constant; correlation undefined");
    }
    Ok(BandwidthStats {
        mean,
        std: var.sqrt(),
        pcc,
    })
}

/// Metrics of one evaluated user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    /// Observed (input) interaction count.
    pub n_int: usize,
    pub alpha: Option<f64>,
    pub recall_20: f64,
    pub recall_40: f64,
    pub ndcg_100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_users: usize,
    /// Users dropped for an empty held-out set.
    pub n_excluded: usize,
    pub recall_20: f64,
    pub recall_40: f64,
    pub ndcg_100: f64,
    /// NDCG@100 by activity quartile, least active first.
    pub ndcg_100_quartiles: Option<[f64; 4]>,
    pub bandwidth: Option<BandwidthStats>,
}

impl EvalReport {
    /// Aggregates per-user metrics.
    pub fn from_users(users: &[UserMetrics], n_excluded: usize) -> Result<Self> {
        if users.is_empty() {
            return Err(Error::EmptyDataset("no users with held-out items to evaluate".into()));
        }
        let n = users.len() as f64;
        let mean = |f: fn(&UserMetrics) -> f64| users.iter().map(f).sum::<f64>() / n;
        let activity: Vec<usize> = users.iter().map(|u| u.n_int).collect();
        let ndcg: Vec<f64> = users.iter().map(|u| u.ndcg_100).collect();
        let alpha: Option<Vec<f64>> = users.iter().map(|u| u.alpha).collect();
        Ok(Self {
            n_users: users.len(),
            n_excluded,
            recall_20: mean(|u| u.recall_20),
            recall_40: mean(|u| u.recall_40),
            ndcg_100: mean(|u| u.ndcg_100),
            ndcg_100_quartiles: quartile_breakdown(&ndcg, &activity).ok(),
            bandwidth: match alpha {
                Some(a) if a.len() >= 2 => Some(bandwidth_stats(&a, &activity)?),
                _ => None,
            },
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Writes `user,n_int,alpha,recall_20,recall_40,ndcg_100` rows.
pub fn write_user_csv(users: &[UserMetrics], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "user,n_int,alpha,recall_20,recall_40,ndcg_100")?;
    for u in users {
        let alpha = u.alpha.map(|a| format!("{a}")).unwrap_or_default();
        writeln!(f, "{},{},{},{},{},{}", u.user, u.n_int, alpha, u.recall_20, u.recall_40, u.ndcg_100)?;
    }
    f.flush()?;
    Ok(())
}

/// Evaluation inputs for a set of users: their observed rows (model input,
/// excluded from ranking) and held-out items.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub users: &'a [usize],
    /// Observed rows indexed by user.
    pub observed: &'a [Vec<usize>],
    pub heldout: &'a BTreeMap<usize, Vec<usize>>,
    pub features: Option<&'a UserFeatureMatrix>,
}

/// Folds in every user with one forward pass, ranks unobserved items and
/// scores the ranking against the held-out items. Batches run in parallel
/// against the same parameters; results do not depend on the thread count.
pub fn evaluate(model: &Vbae, set: EvalSet<'_>, batch_size: usize) -> Result<(EvalReport, Vec<UserMetrics>)> {
    let mut excluded = 0;
    let users: Vec<usize> = set
        .users
        .iter()
        .copied()
        .filter(|u| match set.heldout.get(u) {
            Some(h) if !h.is_empty() => true,
            _ => {
                excluded += 1;
                false
            }
        })
        .collect();
    if excluded > 0 {
        info!("excluded {excluded} users without held-out items");
    }
    let chunks: Vec<Result<Vec<UserMetrics>>> = users
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let rows: Vec<&[usize]> = chunk.iter().map(|&u| set.observed[u].as_slice()).collect();
            let x = dense_features(set.features, chunk, model.n_features());
            let scores = model.score(chunk, &rows, x.view(), None)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(i, &u)| {
                    let list = RankedList {
                        user: u,
                        ranked_items: rank_items(scores.logits.row(i), rows[i], MAX_CUTOFF),
                        heldout: set.heldout[&u].clone(),
                    };
                    UserMetrics {
                        user: u,
                        n_int: rows[i].len(),
                        alpha: scores.alpha.get(i).copied(),
                        recall_20: recall_at_m(&list, 20).expect("non-empty"),
                        recall_40: recall_at_m(&list, 40).expect("non-empty"),
                        ndcg_100: ndcg_at_m(&list, 100).expect("non-empty"),
                    }
                })
                .collect())
        })
        .collect();
    let mut metrics = Vec::with_capacity(users.len());
    for c in chunks {
        metrics.extend(c?);
    }
    Ok((EvalReport::from_users(&metrics, excluded)?, metrics))
}

/// Dense feature rows for `users`, or a zero column when there are none.
pub fn dense_features(features: Option<&UserFeatureMatrix>, users: &[usize], width: usize) -> ndarray::Array2<f64> {
    match features {
        Some(f) => f.dense_rows(users),
        None => ndarray::Array2::zeros((users.len(), width)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn list(ranked: &[usize], heldout: &[usize]) -> RankedList {
        RankedList {
            user: 0,
            ranked_items: ranked.to_vec(),
            heldout: heldout.to_vec(),
        }
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_m(&list(&[3, 1, 2], &[1, 3]), 2), Some(1.0));
        assert_eq!(recall_at_m(&list(&[0, 4, 2], &[1, 3]), 3), Some(0.0));
        assert_eq!(recall_at_m(&list(&[5, 0, 7], &[5, 7]), 2), Some(0.5));
        assert_eq!(recall_at_m(&list(&[5], &[]), 2), None);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_m(&list(&[1, 3, 0], &[1, 3]), 3), Some(1.0));
        assert_eq!(ndcg_at_m(&list(&[4, 0], &[4]), 1), Some(1.0));
        let v = ndcg_at_m(&list(&[5, 0, 7], &[5, 7]), 3).unwrap();
        let expected = (1.0 / 2f64.log2() + 1.0 / 4f64.log2()) / (1.0 / 2f64.log2() + 1.0 / 3f64.log2());
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.9198).abs() < 1e-4);
        let e = ndcg_at_m_with_base(&list(&[5, 0, 7], &[5, 7]), 3, std::f64::consts::E).unwrap();
        assert!((v - e).abs() < 1e-12);
    }

    #[test]
    fn ranking_excludes_observed_and_breaks_ties_by_index() {
        let s = array![0.5, 0.9, 0.5, 0.9, 0.1];
        assert_eq!(rank_items(s.view(), &[1], 3), vec![3, 0, 2]);
        assert_eq!(rank_items(s.view(), &[], 10), vec![1, 3, 0, 2, 4]);
        let shifted = &s + 3.0;
        assert_eq!(rank_items(shifted.view(), &[1], 3), vec![3, 0, 2]);
    }

    #[test]
    fn quartile_examples() {
        assert_eq!(quartile_breakdown(&[0.3; 8], &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap(), [0.3; 4]);
        let act = [5, 1, 8, 3, 2, 7, 4, 6];
        let vals: Vec<f64> = act.iter().map(|&a| a as f64 / 10.0).collect();
        let q = quartile_breakdown(&vals, &act).unwrap();
        assert!(q.windows(2).all(|w| w[0] < w[1]));
        assert!(quartile_breakdown(&[1.0; 3], &[1, 2, 3]).is_err());
    }

    #[test]
    fn bandwidth_examples() {
        let act = [1, 5, 9, 20];
        let alpha: Vec<f64> = act.iter().map(|&a| 0.9 - 0.01 * a as f64).collect();
        let s = bandwidth_stats(&alpha, &act).unwrap();
        assert!((s.pcc.unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(bandwidth_stats(&[0.5; 4], &act).unwrap().pcc, None);
        assert!(bandwidth_stats(&[0.5], &[1]).is_err());
    }
}
