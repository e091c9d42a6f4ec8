use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::{info, warn};

use crate::error::{Error, Result};

/// Sparse binary user × item matrix, one sorted row of item indices per user.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    n_items: usize,
    rows: Vec<Vec<usize>>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
}

impl InteractionMatrix {
    /// Builds a matrix from per-user item lists; rows are sorted and
    /// deduplicated. Ids default to the decimal indices.
    pub fn from_rows(n_items: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        let user_ids = (0..rows.len()).map(|u| u.to_string()).collect();
        let item_ids = (0..n_items).map(|i| i.to_string()).collect();
        Self::with_ids(n_items, rows, user_ids, item_ids)
    }

    pub fn with_ids(
        n_items: usize,
        mut rows: Vec<Vec<usize>>,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
    ) -> Result<Self> {
        if user_ids.len() != rows.len() {
            return Err(Error::dimension("user id map", rows.len(), user_ids.len()));
        }
        if item_ids.len() != n_items {
            return Err(Error::dimension("item id map", n_items, item_ids.len()));
        }
        for row in rows.iter_mut() {
            row.sort_unstable();
            row.dedup();
            if let Some(&last) = row.last() {
                if last >= n_items {
                    return Err(Error::dimension("item index", format!("< {n_items}"), last));
                }
            }
        }
        Ok(Self {
            n_items,
            rows,
            user_ids,
            item_ids,
        })
    }

    pub fn n_users(&self) -> usize {
        self.rows.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn row(&self, user: usize) -> &[usize] {
        &self.rows[user]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn n_interactions(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn density(&self) -> f64 {
        self.n_interactions() as f64 / (self.n_users() as f64 * self.n_items as f64)
    }

    /// Per-user interaction counts.
    pub fn activity(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        // Numeric ids map verbatim; otherwise the id list is sorted.
        match id.parse::<usize>() {
            Ok(i) if i < self.n_items && self.item_ids[i] == id => Some(i),
            _ => self.item_ids.binary_search_by(|x| x.as_str().cmp(id)).ok(),
        }
    }

    /// Same users and items with replaced rows.
    pub fn with_rows(&self, rows: Vec<Vec<usize>>) -> Result<Self> {
        Self::with_ids(
            self.n_items,
            rows,
            self.user_ids.clone(),
            self.item_ids.clone(),
        )
    }

    /// Writes `user_index.tsv` and `item_index.tsv` (`index<TAB>raw id`).
    pub fn write_index_maps(&self, dir: &Path) -> Result<()> {
        for (name, ids) in [("user_index.tsv", &self.user_ids), ("item_index.tsv", &self.item_ids)] {
            let mut f = std::io::BufWriter::new(File::create(dir.join(name))?);
            for (i, id) in ids.iter().enumerate() {
                writeln!(f, "{i}\t{id}")?;
            }
            f.flush()?;
        }
        Ok(())
    }
}

fn all_numeric<'a>(ids: impl IntoIterator<Item = &'a String>) -> bool {
    ids.into_iter().all(|s| s.parse::<usize>().is_ok())
}

fn sorted_ids(ids: BTreeSet<String>) -> Vec<String> {
    let mut ids: Vec<String> = ids.into_iter().collect();
    if all_numeric(&ids) {
        ids.sort_by_key(|s| s.parse::<usize>().expect("numeric"));
    }
    ids
}

/// Reads `user_id<TAB>item_id` lines, drops users with fewer than
/// `min_visits` distinct items, and remaps ids.
///
/// Item ids that are all non-negative integers are used verbatim as column
/// indices; otherwise items are numbered in sorted id order. Retained users are
/// numbered in (numeric, if possible) sorted id order.
pub fn load_interactions(path: impl AsRef<Path>, min_visits: usize) -> Result<InteractionMatrix> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut by_user: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (user, item) = match (fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(i), None) if !u.trim().is_empty() && !i.trim().is_empty() => {
                (u.trim(), i.trim())
            }
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected `user<TAB>item`, got {line:?}"),
                })
            }
        };
        by_user
            .entry(user.to_string())
            .or_default()
            .insert(item.to_string());
    }
    if by_user.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no interactions", path.display())));
    }

    let total_users = by_user.len();
    by_user.retain(|_, items| items.len() >= min_visits);
    if by_user.len() < total_users {
        info!(
            "dropped {} of {} users with fewer than {} interactions",
            total_users - by_user.len(),
            total_users,
            min_visits
        );
    }
    if by_user.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no user in {} has at least {min_visits} interactions",
            path.display()
        )));
    }

    let items: BTreeSet<String> = by_user.values().flatten().cloned().collect();
    let (n_items, item_ids, item_index): (usize, Vec<String>, BTreeMap<String, usize>) =
        if all_numeric(&items) {
            let n = items
                .iter()
                .map(|s| s.parse::<usize>().expect("numeric") + 1)
                .max()
                .unwrap_or(0);
            let index = items
                .iter()
                .map(|s| (s.clone(), s.parse::<usize>().expect("numeric")))
                .collect();
            (n, (0..n).map(|i| i.to_string()).collect(), index)
        } else {
            let ids: Vec<String> = items.into_iter().collect();
            let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
            (ids.len(), ids, index)
        };

    let user_ids = sorted_ids(by_user.keys().cloned().collect());
    let rows = user_ids
        .iter()
        .map(|u| by_user[u].iter().map(|i| item_index[i]).collect())
        .collect();
    let matrix = InteractionMatrix::with_ids(n_items, rows, user_ids, item_ids)?;
    if matrix.rows.iter().any(Vec::is_empty) {
        warn!("matrix contains empty rows");
    }
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn small_numeric_file() {
        let f = write("0\t1\n0\t3\n1\t2\n");
        let m = load_interactions(f.path(), 1).unwrap();
        assert_eq!(m.n_users(), 2);
        assert_eq!(m.rows(), &[vec![1, 3], vec![2]]);
    }

    #[test]
    fn duplicates_collapse() {
        let f = write("0\t1\n0\t1\n");
        let m = load_interactions(f.path(), 1).unwrap();
        assert_eq!(m.rows(), &[vec![1]]);
    }

    #[test]
    fn min_visits_drops_users() {
        let f = write("a\tx\na\ty\nb\tx\nc\tz\nc\tx\n");
        let m = load_interactions(f.path(), 2).unwrap();
        assert_eq!(m.user_ids(), &["a".to_string(), "c".to_string()]);
        assert_eq!(m.item_ids(), &["x", "y", "z"]);
        assert_eq!(m.rows(), &[vec![0, 1], vec![0, 2]]);
        assert_eq!(m.item_index("z"), Some(2));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write("0\t1\n\n0 2\n");
        match load_interactions(f.path(), 1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_inputs_are_fatal() {
        let f = write("\n\n");
        assert!(matches!(load_interactions(f.path(), 1), Err(Error::EmptyDataset(_))));
        let f = write("0\t1\n");
        assert!(matches!(load_interactions(f.path(), 5), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn out_of_range_rows_rejected() {
        assert!(InteractionMatrix::from_rows(3, vec![vec![0, 3]]).is_err());
    }
}
