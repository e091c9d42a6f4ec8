use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::run::{Aggregate, MeanStd, AGGREGATE_FORMAT};
use super::SCHEMA_VERSION;
use crate::error::{Error, Result};
use crate::eval::EvalReport;

/// One compared model: a single test report or one variant of an aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub recall_20: MeanStd,
    pub recall_40: MeanStd,
    pub ndcg_100: MeanStd,
    /// Mean and standard deviation of α over users.
    pub bandwidth: Option<(f64, f64)>,
    pub pcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Report,
    Aggregate,
}

const METRICS: [&str; 3] = ["recall_20", "recall_40", "ndcg_100"];

fn point(x: f64) -> MeanStd {
    MeanStd { mean: x, std: 0.0 }
}

fn label_for(path: &Path, depth: usize) -> String {
    let parts: Vec<_> = path
        .parent()
        .map(|p| p.components().rev().take(depth).collect::<Vec<_>>())
        .unwrap_or_default();
    let label: PathBuf = parts.into_iter().rev().collect();
    if label.as_os_str().is_empty() {
        path.display().to_string()
    } else {
        label.display().to_string()
    }
}

fn detect(path: &Path, value: &Value) -> Result<Kind> {
    match value.get("format").and_then(Value::as_str) {
        Some(AGGREGATE_FORMAT) => match value.get("schema_version").and_then(Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => Ok(Kind::Aggregate),
            v => Err(Error::Report(format!(
                "{}: aggregate schema_version {v:?}, expected {SCHEMA_VERSION}",
                path.display()
            ))),
        },
        Some(other) => Err(Error::Report(format!("{}: unknown report format `{other}`", path.display()))),
        None => Ok(Kind::Report),
    }
}

fn rows_from(path: &Path, kind: Kind, value: Value) -> Result<Vec<ComparisonRow>> {
    let bad = |e: serde_json::Error| Error::Report(format!("{}: {e}", path.display()));
    match kind {
        Kind::Report => {
            let r: EvalReport = serde_json::from_value(value).map_err(bad)?;
            Ok(vec![ComparisonRow {
                label: label_for(path, 2),
                recall_20: point(r.recall_20),
                recall_40: point(r.recall_40),
                ndcg_100: point(r.ndcg_100),
                bandwidth: r.bandwidth.as_ref().map(|b| (b.mean, b.std)),
                pcc: r.bandwidth.and_then(|b| b.pcc),
            }])
        }
        Kind::Aggregate => {
            let a: Aggregate = serde_json::from_value(value).map_err(bad)?;
            let label = label_for(path, 1);
            Ok(a.variants
                .into_iter()
                .map(|v| ComparisonRow {
                    label: format!("{label}:{}", v.variant),
                    recall_20: v.recall_20,
                    recall_40: v.recall_40,
                    ndcg_100: v.ndcg_100,
                    bandwidth: v.bandwidth_mean.zip(v.bandwidth_std).map(|(m, s)| (m.mean, s.mean)),
                    pcc: v.pcc.map(|p| p.mean),
                })
                .collect())
        }
    }
}

/// Reads reports of one kind: test `report.json` files or `aggregate.json`
/// files. A file of the other kind or with a foreign schema is an error
/// naming that file.
pub fn load_rows(paths: &[PathBuf]) -> Result<Vec<ComparisonRow>> {
    let mut first: Option<(Kind, &Path)> = None;
    let mut rows = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(path)?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
        let kind = detect(path, &value)?;
        match first {
            None => first = Some((kind, path)),
            Some((k, p)) if k != kind => {
                return Err(Error::Report(format!(
                    "{}: schema differs from {} ({kind:?} vs {k:?})",
                    path.display(),
                    p.display()
                )))
            }
            Some(_) => {}
        }
        rows.extend(rows_from(path, kind, value)?);
    }
    Ok(rows)
}

/// Compares at least two reports.
pub fn compare(paths: &[PathBuf]) -> Result<ComparisonTable> {
    if paths.len() < 2 {
        return Err(Error::Usage("compare needs at least two reports".into()));
    }
    Ok(ComparisonTable { rows: load_rows(paths)? })
}

impl ComparisonRow {
    fn metric(&self, i: usize) -> MeanStd {
        [self.recall_20, self.recall_40, self.ndcg_100][i]
    }
}

impl ComparisonTable {
    /// For each metric column, whether each row holds the best mean (ties
    /// all count).
    pub fn best(&self) -> Vec<[bool; 3]> {
        let top: Vec<f64> = (0..3)
            .map(|i| self.rows.iter().map(|r| r.metric(i).mean).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        self.rows
            .iter()
            .map(|r| [0, 1, 2].map(|i| r.metric(i).mean == top[i]))
            .collect()
    }

    /// Aligned text table; `*` marks the best value per metric column.
    pub fn to_text(&self) -> String {
        let best = self.best();
        let header = ["model", "Recall@20", "Recall@40", "NDCG@100", "bandwidth", "PCC"];
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .zip(&best)
            .map(|(r, b)| {
                let m = |i: usize| {
                    let v = r.metric(i);
                    format!("{:.4} ± {:.4}{}", v.mean, v.std, if b[i] { "*" } else { " " })
                };
                [
                    r.label.clone(),
                    m(0),
                    m(1),
                    m(2),
                    r.bandwidth.map_or("-".into(), |(m, s)| format!("{m:.3} ± {s:.3}")),
                    r.pcc.map_or("-".into(), |p| format!("{p:+.3}")),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..6)
            .map(|c| cells.iter().map(|r| r[c].chars().count()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            let padded: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&mut out, &header);
        for row in &cells {
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }

    /// CSV with one row per model; `best` lists the columns the row wins.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,recall_20,recall_20_std,recall_40,recall_40_std,ndcg_100,ndcg_100_std,bandwidth_mean,bandwidth_std,pcc,best\n",
        );
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for (r, b) in self.rows.iter().zip(self.best()) {
            let wins: Vec<&str> = (0..3).filter(|&i| b[i]).map(|i| METRICS[i]).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                csv_field(&r.label),
                r.recall_20.mean,
                r.recall_20.std,
                r.recall_40.mean,
                r.recall_40.std,
                r.ndcg_100.mean,
                r.ndcg_100.std,
                opt(r.bandwidth.map(|b| b.0)),
                opt(r.bandwidth.map(|b| b.1)),
                opt(r.pcc),
                wins.join(";"),
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::BandwidthStats;

    fn report(ndcg: f64, pcc: Option<f64>) -> EvalReport {
        EvalReport {
            n_users: 10,
            n_excluded: 0,
            recall_20: 0.2,
            recall_40: 0.3,
            ndcg_100: ndcg,
            ndcg_100_quartiles: None,
            bandwidth: pcc.map(|p| BandwidthStats { mean: 0.4, std: 0.1, pcc: Some(p) }),
        }
    }

    #[test]
    fn marks_best_and_writes_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for (name, r) in [("soft", report(0.5, Some(-0.8))), ("stop", report(0.4, None))] {
            let d = dir.path().join("seed-0").join(name);
            std::fs::create_dir_all(&d).unwrap();
            r.write_json(&d.join("report.json")).unwrap();
            paths.push(d.join("report.json"));
        }
        let t = compare(&paths).unwrap();
        assert_eq!(t.rows[0].label, "seed-0/soft");
        assert_eq!(t.best(), vec![[true, true, true], [true, true, false]]);
        let text = t.to_text();
        assert!(text.contains("0.5000 ± 0.0000*"), "{text}");
        assert!(text.contains("-0.800"));
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().ends_with(",,,recall_20;recall_40"), "{csv}");
    }

    #[test]
    fn rejects_mixed_or_foreign_schemas() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        report(0.5, None).write_json(&a).unwrap();
        let agg = dir.path().join("agg.json");
        std::fs::write(
            &agg,
            format!(r#"{{"format":"{AGGREGATE_FORMAT}","schema_version":1,"config_sha256":"x","seeds":[],"variants":[]}}"#),
        )
        .unwrap();
        let e = compare(&[a.clone(), agg.clone()]).unwrap_err().to_string();
        assert!(e.contains("agg.json"), "{e}");
        let old = dir.path().join("old.json");
        std::fs::write(&old, format!(r#"{{"format":"{AGGREGATE_FORMAT}","schema_version":0}}"#)).unwrap();
        let e = compare(&[agg, old]).unwrap_err().to_string();
        assert!(e.contains("old.json"), "{e}");
        let broken = dir.path().join("broken.json");
        std::fs::write(&broken, r#"{"ndcg_100": 1}"#).unwrap();
        let e = compare(&[a.clone(), broken]).unwrap_err().to_string();
        assert!(e.contains("broken.json"), "{e}");
        assert!(matches!(compare(&[a]), Err(Error::Usage(_))));
    }
}
