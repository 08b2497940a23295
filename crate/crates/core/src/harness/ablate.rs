//! The 3x3 crop-strategy by pooling grid, replicated over seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{load_dataset, run_on, ExperimentResult, TrainOptions};
use super::{with_thread_limit, write_atomic};
use crate::error::{Error, Result};
use crate::model::BranchKind;
use crate::pooling::PoolMode;

/// Pooling columns of the grid, in table order.
pub const GRID_POOLS: [&str; 3] = ["average", "max", "dynamic_outlier"];
pub const TABLE_FILE: &str = "ablation.md";
pub const CSV_FILE: &str = "ablation.csv";

pub fn pool_caption(pool: &str) -> &'static str {
    match pool {
        "average" => "Average",
        "max" => "Max",
        "outlier" => "Outlier",
        "dynamic_outlier" => "Dynamic Outlier",
        _ => "?",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub kind: BranchKind,
    pub pool: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub result: std::result::Result<ExperimentResult, String>,
}

impl CellRun {
    pub fn accuracy(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|r| r.test.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<CellRun>,
}

/// The run configuration of one grid cell: the base config with the branch
/// kind, pooling mode and seed replaced, writing to `<out>/<kind>/<pool>/seed_<seed>`.
pub fn cell_config(base: &RunConfig, kind: BranchKind, pool: &str, seed: u64) -> RunConfig {
    let mut c = base.with_seed(seed);
    c.model.kind = kind;
    c.pool.mode = pool.into();
    c.train.output_dir = base
        .train
        .output_dir
        .join(kind.label())
        .join(pool)
        .join(format!("seed_{seed}"));
    c
}

/// Trains all nine cells for every seed. A failing cell is recorded with its
/// error and the remaining cells still run; the first failure to even load
/// the data aborts, since no cell could run.
pub fn run_ablation(base: &RunConfig, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("the ablation needs at least one seed".into()));
    }
    for kind in BranchKind::ALL {
        for pool in GRID_POOLS {
            cell_config(base, kind, pool, seeds[0]).validate()?;
        }
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let seeded = base.with_seed(seed);
        let dataset = with_thread_limit(|| load_dataset(&seeded.data))?;
        let cells: Vec<(BranchKind, &str)> = BranchKind::ALL
            .into_iter()
            .flat_map(|k| GRID_POOLS.map(|p| (k, p)))
            .collect();
        let done: Vec<CellRun> = with_thread_limit(|| {
            cells
                .into_par_iter()
                .map(|(kind, pool)| {
                    let config = cell_config(base, kind, pool, seed);
                    let result = run_on(&config, &dataset, &TrainOptions::default());
                    if let Err(e) = &result {
                        log::warn!("{} / {pool} seed {seed} failed: {e}", kind.label());
                    } else {
                        log::info!("{} / {pool} seed {seed} done", kind.label());
                    }
                    CellRun {
                        kind,
                        pool: pool.into(),
                        seed,
                        output_dir: config.train.output_dir.clone(),
                        result: result.map_err(|e| e.to_string()),
                    }
                })
                .collect()
        });
        runs.extend(done);
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        runs,
    })
}

/// Mean and sample standard deviation; `None` without values.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

/// Per-seed verdicts for the two grid orderings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOrdering {
    pub seed: u64,
    /// Per row, in `BranchKind::ALL` order: dynamic outlier beat both
    /// average and max. `None` when a cell is missing.
    pub dynamic_best_in_row: Vec<Option<bool>>,
    /// Per column, in `GRID_POOLS` order: multi-res beat global-only.
    pub multires_beats_global: Vec<Option<bool>>,
}

impl SeedOrdering {
    pub fn dynamic_best_everywhere(&self) -> bool {
        self.dynamic_best_in_row.iter().all(|v| *v == Some(true))
    }

    pub fn multires_better_everywhere(&self) -> bool {
        self.multires_beats_global.iter().all(|v| *v == Some(true))
    }
}

impl AblationReport {
    pub fn cell(&self, kind: BranchKind, pool: &str, seed: u64) -> Option<&CellRun> {
        self.runs
            .iter()
            .find(|r| r.kind == kind && r.pool == pool && r.seed == seed)
    }

    pub fn accuracies(&self, kind: BranchKind, pool: &str) -> Vec<f64> {
        self.seeds
            .iter()
            .filter_map(|&s| self.cell(kind, pool, s).and_then(CellRun::accuracy))
            .collect()
    }

    pub fn failures(&self) -> Vec<&CellRun> {
        self.runs.iter().filter(|r| r.result.is_err()).collect()
    }

    pub fn orderings(&self) -> Vec<SeedOrdering> {
        let acc = |k, p, s| self.cell(k, p, s).and_then(CellRun::accuracy);
        self.seeds
            .iter()
            .map(|&seed| SeedOrdering {
                seed,
                dynamic_best_in_row: BranchKind::ALL
                    .iter()
                    .map(|&k| {
                        let d = acc(k, "dynamic_outlier", seed)?;
                        Some(d > acc(k, "average", seed)? && d > acc(k, "max", seed)?)
                    })
                    .collect(),
                multires_beats_global: GRID_POOLS
                    .iter()
                    .map(|&p| {
                        Some(
                            acc(BranchKind::MultiRes, p, seed)?
                                > acc(BranchKind::GlobalOnly, p, seed)?,
                        )
                    })
                    .collect(),
            })
            .collect()
    }

    /// Test accuracy table, mean ± std over seeds, with failed cells noted.
    pub fn markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Test accuracy, mean ± std over {} seed(s).\n",
            self.seeds.len()
        );
        out += &grid_table(|kind, pool| {
            let values = self.accuracies(kind, pool);
            let failed = self.seeds.len() - values.len();
            let mut cell = match mean_std(&values) {
                Some((m, s)) => format!("{m:.4} ± {s:.4}"),
                None => "n/a".into(),
            };
            if failed > 0 {
                let _ = write!(cell, " ({failed} failed)");
            }
            cell
        });
        let orderings = self.orderings();
        let n = orderings.len();
        let dyn_best = orderings
            .iter()
            .filter(|o| o.dynamic_best_everywhere())
            .count();
        let mr_best = orderings
            .iter()
            .filter(|o| o.multires_better_everywhere())
            .count();
        let _ = writeln!(
            out,
            "\nDynamic Outlier best in every row: {dyn_best}/{n} seeds."
        );
        for (i, kind) in BranchKind::ALL.iter().enumerate() {
            let wins = orderings
                .iter()
                .filter(|o| o.dynamic_best_in_row[i] == Some(true))
                .count();
            let _ = writeln!(out, "- {}: {wins}/{n}", kind.caption());
        }
        let _ = writeln!(
            out,
            "\nMulti-crop (high and low res) above Whole Image in every column: {mr_best}/{n} seeds."
        );
        for (i, pool) in GRID_POOLS.iter().enumerate() {
            let wins = orderings
                .iter()
                .filter(|o| o.multires_beats_global[i] == Some(true))
                .count();
            let _ = writeln!(out, "- {}: {wins}/{n}", pool_caption(pool));
        }
        let failures = self.failures();
        if !failures.is_empty() {
            let _ = writeln!(out, "\nFailed cells:");
            for f in failures {
                let _ = writeln!(
                    out,
                    "- {} / {} seed {}: {}",
                    f.kind.caption(),
                    pool_caption(&f.pool),
                    f.seed,
                    f.result.as_ref().err().map_or("", String::as_str)
                );
            }
        }
        out
    }

    pub fn csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let row_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record([
            "branch",
            "pool",
            "seed",
            "status",
            "test_accuracy",
            "final_train_loss",
            "fingerprint",
            "error",
        ])
        .map_err(row_err)?;
        for r in &self.runs {
            let seed = r.seed.to_string();
            let record = match &r.result {
                Ok(res) => [
                    r.kind.label().to_string(),
                    r.pool.clone(),
                    seed,
                    "ok".into(),
                    format!("{}", res.test.accuracy),
                    res.epochs
                        .last()
                        .map_or(String::new(), |e| format!("{}", e.train_loss)),
                    res.fingerprint.clone(),
                    String::new(),
                ],
                Err(e) => [
                    r.kind.label().to_string(),
                    r.pool.clone(),
                    seed,
                    "failed".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    e.clone(),
                ],
            };
            w.write_record(&record).map_err(row_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes the markdown table and the CSV into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(TABLE_FILE), self.markdown().as_bytes())?;
        write_atomic(&dir.join(CSV_FILE), self.csv()?.as_bytes())
    }
}

/// A markdown table laid out as crop-strategy rows by pooling columns.
pub fn grid_table(mut cell: impl FnMut(BranchKind, &str) -> String) -> String {
    let mut out = String::from("| Crops |");
    for p in GRID_POOLS {
        let _ = write!(out, " {} |", pool_caption(p));
    }
    out += "\n|---|";
    out += &"---|".repeat(GRID_POOLS.len());
    out += "\n";
    for kind in BranchKind::ALL {
        let _ = write!(out, "| {} |", kind.caption());
        for p in GRID_POOLS {
            let _ = write!(out, " {} |", cell(kind, p));
        }
        out += "\n";
    }
    out
}

/// Checks a pool label names a grid column.
pub fn is_grid_pool(label: &str, lambda: f64) -> bool {
    PoolMode::parse(label, lambda).is_ok_and(|m| GRID_POOLS.contains(&m.label()))
}
