use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::{debug, warn};
use ndarray::Array2;

use super::InteractionMatrix;
use crate::error::{Error, Result};

/// Raw token counts per item, aligned with the item indices of an
/// [`InteractionMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct ItemTokenCounts {
    vocab: Vec<String>,
    items: Vec<Vec<(usize, f64)>>,
}

impl ItemTokenCounts {
    /// `items[i]` lists `(token index, count)` pairs for item `i`.
    pub fn new(vocab: Vec<String>, mut items: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for row in items.iter_mut() {
            row.sort_by_key(|&(t, _)| t);
            for &(t, c) in row.iter() {
                if t >= vocab.len() {
                    return Err(Error::dimension("token index", format!("< {}", vocab.len()), t));
                }
                if !(c >= 0.0 && c.is_finite()) {
                    return Err(Error::Numeric(format!("invalid token count {c}")));
                }
            }
        }
        Ok(Self { vocab, items })
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn item(&self, i: usize) -> &[(usize, f64)] {
        &self.items[i]
    }
}

/// Reads `item_id<TAB>token<TAB>count` lines for the items of `inter`.
/// Lines for unknown items are skipped; repeated `(item, token)` pairs add up.
pub fn load_item_tokens(path: impl AsRef<Path>, inter: &InteractionMatrix) -> Result<ItemTokenCounts> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut counts: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); inter.n_items()];
    let mut skipped = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields[1].is_empty() {
            return Err(parse_err(format!("expected `item<TAB>token<TAB>count`, got {line:?}")));
        }
        let count: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("invalid count {:?}", fields[2])))?;
        if !(count >= 0.0 && count.is_finite()) {
            return Err(parse_err(format!("negative or non-finite count {count}")));
        }
        match inter.item_index(fields[0].trim()) {
            Some(i) => *counts[i].entry(fields[1].to_string()).or_default() += count,
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        debug!("skipped {skipped} token lines for items outside the interaction matrix");
    }
    let vocab: Vec<String> = counts
        .iter()
        .flat_map(|m| m.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let items = counts
        .iter()
        .map(|m| m.iter().map(|(t, &c)| (index[t.as_str()], c)).collect())
        .collect();
    let missing = counts.iter().filter(|m| m.is_empty()).count();
    if missing > 0 {
        warn!("{missing} items have no token counts; their feature vectors are zero");
    }
    ItemTokenCounts::new(vocab, items)
}

/// Dense-or-sparse user × vocabulary matrix with entries in `[0, 1]`, stored as
/// sorted sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct UserFeatureMatrix {
    dim: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl UserFeatureMatrix {
    pub fn new(dim: usize, mut rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for row in rows.iter_mut() {
            row.sort_by_key(|&(c, _)| c);
            row.retain(|&(_, v)| v != 0.0);
            for &(c, v) in row.iter() {
                if c >= dim {
                    return Err(Error::dimension("feature column", format!("< {dim}"), c));
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Numeric(format!("feature value {v} outside [0, 1]")));
                }
            }
        }
        Ok(Self { dim, rows })
    }

    pub fn from_dense(x: &Array2<f64>) -> Result<Self> {
        let rows = x
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(c, &v)| (c, v))
                    .collect()
            })
            .collect();
        Self::new(x.ncols(), rows)
    }

    pub fn n_users(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, user: usize) -> &[(usize, f64)] {
        &self.rows[user]
    }

    /// Dense `users.len() × dim` block.
    pub fn dense_rows(&self, users: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((users.len(), self.dim));
        for (r, &u) in users.iter().enumerate() {
            for &(c, v) in &self.rows[u] {
                out[[r, c]] = v;
            }
        }
        out
    }
}

/// Reads precomputed user features, one `user_id<TAB>column<TAB>value` line per
/// non-zero entry, for the users of `inter`. The width is `dim` when given,
/// otherwise one past the largest column seen.
pub fn load_user_features(
    path: impl AsRef<Path>,
    inter: &InteractionMatrix,
    dim: Option<usize>,
) -> Result<UserFeatureMatrix> {
    let path = path.as_ref();
    let index: std::collections::HashMap<&str, usize> =
        inter.user_ids().iter().enumerate().map(|(u, id)| (id.as_str(), u)).collect();
    let mut rows = vec![Vec::new(); inter.n_users()];
    let mut width = 0;
    for (lineno, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected `user<TAB>column<TAB>value`, got {line:?}")));
        }
        let column: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("invalid column {:?}", fields[1])))?;
        let value: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("invalid value {:?}", fields[2])))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(parse_err(format!("value {value} outside [0, 1]")));
        }
        width = width.max(column + 1);
        if let Some(&u) = index.get(fields[0]) {
            rows[u].push((column, value));
        }
    }
    let dim = match dim {
        Some(d) if d < width => return Err(Error::dimension("user feature columns", format!("< {d}"), width - 1)),
        Some(d) => d,
        None => width,
    };
    if dim == 0 {
        return Err(Error::EmptyDataset(format!("{} has no feature entries", path.display())));
    }
    UserFeatureMatrix::new(dim, rows)
}

/// Discriminative vocabulary and per-item normalized word counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemFeatures {
    dim: usize,
    vocab: Vec<String>,
    items: Vec<Vec<(usize, f64)>>,
}

/// Smoothed inverse document frequency `ln((1 + N)/(1 + df)) + 1`.
pub fn smooth_idf(n_docs: usize, df: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

impl ItemFeatures {
    /// Selects the `vocab_size` tokens with the highest corpus tf-idf score
    /// (`Σ_items count · idf`, ties by token string), then divides each
    /// selected token's counts by its maximum count over all items.
    pub fn build(tokens: &ItemTokenCounts, vocab_size: usize) -> Self {
        let n_tokens = tokens.vocab.len();
        let mut df = vec![0usize; n_tokens];
        let mut tf = vec![0f64; n_tokens];
        let mut max_count = vec![0f64; n_tokens];
        for row in &tokens.items {
            for &(t, c) in row {
                if c > 0.0 {
                    df[t] += 1;
                }
                tf[t] += c;
                max_count[t] = max_count[t].max(c);
            }
        }
        let mut order: Vec<usize> = (0..n_tokens).filter(|&t| max_count[t] > 0.0).collect();
        let score = |t: usize| tf[t] * smooth_idf(tokens.n_items(), df[t]);
        order.sort_by(|&a, &b| {
            score(b)
                .total_cmp(&score(a))
                .then_with(|| tokens.vocab[a].cmp(&tokens.vocab[b]))
        });
        order.truncate(vocab_size);
        if order.len() < vocab_size {
            warn!(
                "only {} informative tokens for a vocabulary of {vocab_size}; trailing columns stay zero",
                order.len()
            );
        }
        let mut column = vec![usize::MAX; n_tokens];
        for (c, &t) in order.iter().enumerate() {
            column[t] = c;
        }
        let items = tokens
            .items
            .iter()
            .map(|row| {
                let mut v: Vec<(usize, f64)> = row
                    .iter()
                    .filter(|&&(t, c)| column[t] != usize::MAX && c > 0.0)
                    .map(|&(t, c)| (column[t], c / max_count[t]))
                    .collect();
                v.sort_by_key(|&(c, _)| c);
                v
            })
            .collect();
        Self {
            dim: vocab_size,
            vocab: order.iter().map(|&t| tokens.vocab[t].clone()).collect(),
            items,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn item(&self, i: usize) -> &[(usize, f64)] {
        &self.items[i]
    }

    /// Element-wise maximum of the normalized item vectors in each row.
    pub fn user_features(&self, rows: &[Vec<usize>]) -> UserFeatureMatrix {
        let mut empty = 0usize;
        let out = rows
            .iter()
            .map(|row| {
                if row.is_empty() {
                    empty += 1;
                }
                let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
                for &i in row {
                    for &(c, v) in &self.items[i] {
                        let e = acc.entry(c).or_insert(0.0);
                        *e = e.max(v);
                    }
                }
                acc.into_iter().collect()
            })
            .collect();
        if empty > 0 {
            warn!("{empty} users have no observed items; their feature rows are all zeros");
        }
        UserFeatureMatrix::new(self.dim, out).expect("normalized features lie in [0, 1]")
    }
}

/// Builds user profiles from the rows of `inter`. Pass a matrix that holds
/// only observed items for evaluation users.
pub fn build_user_features(
    tokens: &ItemTokenCounts,
    inter: &InteractionMatrix,
    vocab_size: usize,
) -> UserFeatureMatrix {
    ItemFeatures::build(tokens, vocab_size).user_features(inter.rows())
}
