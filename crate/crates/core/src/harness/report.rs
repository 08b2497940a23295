//! Aggregates `result.json` files under a directory into markdown.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::ablate::{grid_table, is_grid_pool, mean_std, pool_caption};
use super::train::{ExperimentResult, RESULT_FILE};
use crate::error::{Error, Result};
use crate::model::BranchKind;

/// Results sharing branch, pooling mode and lambda: the seeds of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub branch: BranchKind,
    pub pool: String,
    pub lambda: Option<f64>,
    pub results: Vec<(PathBuf, ExperimentResult)>,
}

impl CellSummary {
    pub fn accuracies(&self) -> Vec<f64> {
        self.results.iter().map(|(_, r)| r.test.accuracy).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub cells: Vec<CellSummary>,
    pub warnings: Vec<String>,
}

fn find_results(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_results(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == RESULT_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// Reads every `result.json` below `dir`. Malformed files are skipped with
/// a warning; a cell whose seeds disagree on the config fingerprint is kept
/// but also warned about.
pub fn collect(dir: &Path) -> Result<Report> {
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let mut paths = Vec::new();
    find_results(dir, &mut paths)?;
    let mut report = Report::default();
    let mut cells: BTreeMap<(usize, String, String), CellSummary> = BTreeMap::new();
    for path in paths {
        let result = match ExperimentResult::load(&path) {
            Ok(r) => r,
            Err(e) => {
                report
                    .warnings
                    .push(format!("skipping malformed {}: {e}", path.display()));
                continue;
            }
        };
        let kind_order = BranchKind::ALL
            .iter()
            .position(|k| *k == result.branch)
            .expect("every kind is listed");
        let key = (
            kind_order,
            result.pool.clone(),
            format!("{:?}", result.lambda),
        );
        cells
            .entry(key)
            .or_insert_with(|| CellSummary {
                branch: result.branch,
                pool: result.pool.clone(),
                lambda: result.lambda,
                results: Vec::new(),
            })
            .results
            .push((path, result));
    }
    for cell in cells.values() {
        let first = &cell.results[0].1.fingerprint;
        if let Some((p, r)) = cell.results.iter().find(|(_, r)| &r.fingerprint != first) {
            report.warnings.push(format!(
                "fingerprint mismatch in {} / {}: {} has {} but {} has {first}",
                cell.branch.label(),
                cell.pool,
                p.display(),
                r.fingerprint,
                cell.results[0].0.display()
            ));
        }
    }
    report.cells = cells.into_values().collect();
    Ok(report)
}

fn fmt_mean_std(values: &[f64]) -> String {
    mean_std(values).map_or("n/a".into(), |(m, s)| format!("{m:.4} ± {s:.4}"))
}

/// Column-wise mean of equally long rows; shorter rows are ignored per column.
fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    (0..width)
        .map(|j| {
            let col: Vec<f64> = rows.iter().filter_map(|r| r.get(j).copied()).collect();
            col.iter().sum::<f64>() / col.len() as f64
        })
        .collect()
}

impl Report {
    /// True when every cell is one of the nine grid cells at most once.
    fn is_grid(&self) -> bool {
        !self.cells.is_empty()
            && self
                .cells
                .iter()
                .all(|c| is_grid_pool(&c.pool, c.lambda.unwrap_or(2.0)))
            && self.cells.iter().enumerate().all(|(i, c)| {
                self.cells[..i]
                    .iter()
                    .all(|d| (d.branch, &d.pool) != (c.branch, &c.pool))
            })
    }

    pub fn markdown(&self) -> String {
        let mut out = String::from("# Results\n\n");
        out += "| Branch | Pool | Lambda | Seeds | Test accuracy | Fingerprint |\n";
        out += "|---|---|---|---|---|---|\n";
        for c in &self.cells {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                c.branch.caption(),
                pool_caption(&c.pool),
                c.lambda.map_or("-".into(), |l| l.to_string()),
                c.results.len(),
                fmt_mean_std(&c.accuracies()),
                c.results[0].1.fingerprint
            );
        }
        if self.is_grid() {
            out += "\n## Grid\n\n";
            out += &grid_table(|kind, pool| {
                self.cells
                    .iter()
                    .find(|c| c.branch == kind && c.pool == pool)
                    .map_or("n/a".into(), |c| fmt_mean_std(&c.accuracies()))
            });
        }
        if !self.cells.is_empty() {
            out += "\n## Per-class test accuracy\n\n";
            let k = self
                .cells
                .iter()
                .flat_map(|c| {
                    c.results
                        .iter()
                        .map(|(_, r)| r.test.per_class_accuracy.len())
                })
                .max()
                .unwrap_or(0);
            out += "| Branch | Pool |";
            for j in 0..k {
                let _ = write!(out, " {j} |");
            }
            out += "\n|---|---|";
            out += &"---|".repeat(k);
            out += "\n";
            for c in &self.cells {
                let rows: Vec<Vec<f64>> = c
                    .results
                    .iter()
                    .map(|(_, r)| r.test.per_class_accuracy.clone())
                    .collect();
                let _ = write!(
                    out,
                    "| {} | {} |",
                    c.branch.caption(),
                    pool_caption(&c.pool)
                );
                for v in column_means(&rows) {
                    let _ = write!(out, " {v:.3} |");
                }
                out += "\n";
            }
        }
        let outlier: Vec<&CellSummary> = self.cells.iter().filter(|c| c.lambda.is_some()).collect();
        if !outlier.is_empty() {
            out += "\n## Outlier fallback rate per epoch\n\n";
            out += "Share of pooled channels where no location reached the threshold.\n\n";
            for c in outlier {
                let rows: Vec<Vec<f64>> = c
                    .results
                    .iter()
                    .map(|(_, r)| r.epochs.iter().filter_map(|e| e.fallback_rate).collect())
                    .collect();
                let timeline: Vec<String> = column_means(&rows)
                    .iter()
                    .map(|v| format!("{v:.3}"))
                    .collect();
                let test: Vec<f64> = c
                    .results
                    .iter()
                    .filter_map(|(_, r)| r.test.fallback_rate)
                    .collect();
                let _ = writeln!(
                    out,
                    "- {} / {}: {} (test {})",
                    c.branch.caption(),
                    pool_caption(&c.pool),
                    timeline.join(", "),
                    fmt_mean_std(&test)
                );
            }
        }
        out
    }
}
