//! Training-accuracy curves of dynamic against static outlier pooling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{load_dataset, run_on, ExperimentResult, TrainOptions};
use super::{with_thread_limit, write_atomic};
use crate::error::{Error, Result};

pub const DYNAMIC: &str = "dynamic_outlier";
pub const STATIC: &str = "outlier";
/// Share of the final training accuracy a run must reach.
pub const TARGET_FRACTION: f64 = 0.9;
pub const SUMMARY_FILE: &str = "convergence.md";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedConvergence {
    pub seed: u64,
    pub dynamic: ExperimentResult,
    pub outlier: ExperimentResult,
    pub dynamic_epochs: usize,
    pub outlier_epochs: usize,
    /// Epochs until each run reaches the target fraction of the better of the
    /// two final accuracies; `None` if it never does.
    pub common_target_epochs: (Option<usize>, Option<usize>),
}

impl SeedConvergence {
    pub fn dynamic_not_slower(&self) -> bool {
        self.dynamic_epochs <= self.outlier_epochs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub learning_rate: f64,
    pub runs: Vec<SeedConvergence>,
}

/// Epochs of training until the per-epoch training accuracy first reaches
/// `fraction` of its last value; 0 for an empty curve.
pub fn epochs_to_fraction(curve: &[f64], fraction: f64) -> usize {
    let Some(&last) = curve.last() else {
        return 0;
    };
    curve
        .iter()
        .position(|&a| a >= fraction * last)
        .map_or(curve.len(), |i| i + 1)
}

/// The dynamic and static configurations for one seed. They differ only in
/// the pooling mode: both train at the learning rate the base config gives
/// dynamic outlier pooling.
pub fn pair_configs(base: &RunConfig, seed: u64) -> (RunConfig, RunConfig) {
    let mut dynamic = base.with_seed(seed);
    dynamic.pool.mode = DYNAMIC.into();
    dynamic.train.learning_rate = dynamic.learning_rate();
    dynamic.train.learning_rate_by_pool.clear();
    let mut outlier = dynamic.clone();
    outlier.pool.mode = STATIC.into();
    let dir = base.train.output_dir.join(format!("seed_{seed}"));
    dynamic.train.output_dir = dir.join(DYNAMIC);
    outlier.train.output_dir = dir.join(STATIC);
    (dynamic, outlier)
}

pub fn run_convergence(base: &RunConfig, seeds: &[u64]) -> Result<ConvergenceReport> {
    if seeds.is_empty() {
        return Err(Error::Config("convergence needs at least one seed".into()));
    }
    let (probe, _) = pair_configs(base, seeds[0]);
    probe.validate()?;
    let mut runs = Vec::new();
    for &seed in seeds {
        let (dynamic, outlier) = pair_configs(base, seed);
        let dataset = with_thread_limit(|| load_dataset(&dynamic.data))?;
        let mut pair = with_thread_limit(|| {
            [&dynamic, &outlier]
                .into_par_iter()
                .map(|c| run_on(c, &dataset, &TrainOptions::default()))
                .collect::<Result<Vec<_>>>()
        })?;
        let outlier = pair.pop().expect("two runs");
        let dynamic = pair.pop().expect("two runs");
        let (dc, oc) = (train_curve(&dynamic), train_curve(&outlier));
        let best = dc
            .last()
            .copied()
            .unwrap_or(0.0)
            .max(oc.last().copied().unwrap_or(0.0));
        let reach = |c: &[f64]| {
            c.iter()
                .position(|&a| a >= TARGET_FRACTION * best)
                .map(|i| i + 1)
        };
        runs.push(SeedConvergence {
            seed,
            common_target_epochs: (reach(&dc), reach(&oc)),
            dynamic_epochs: epochs_to_fraction(&dc, TARGET_FRACTION),
            outlier_epochs: epochs_to_fraction(&oc, TARGET_FRACTION),
            dynamic,
            outlier,
        });
    }
    Ok(ConvergenceReport {
        learning_rate: probe.learning_rate(),
        runs,
    })
}

pub fn train_curve(r: &ExperimentResult) -> Vec<f64> {
    r.epochs.iter().map(|e| e.train_accuracy).collect()
}

impl ConvergenceReport {
    pub fn dynamic_not_slower_count(&self) -> usize {
        self.runs.iter().filter(|r| r.dynamic_not_slower()).count()
    }

    /// Header, the pre-training evaluation as epoch 0, then one row per
    /// trained epoch.
    pub fn curve_csv(run: &SeedConvergence) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record([
            "epoch",
            "dynamic_train_accuracy",
            "outlier_train_accuracy",
            "dynamic_train_loss",
            "outlier_train_loss",
        ])
        .map_err(err)?;
        let (d, o) = (&run.dynamic, &run.outlier);
        w.write_record([
            "0".to_string(),
            d.initial.accuracy.to_string(),
            o.initial.accuracy.to_string(),
            d.initial.loss.to_string(),
            o.initial.loss.to_string(),
        ])
        .map_err(err)?;
        for (a, b) in d.epochs.iter().zip(&o.epochs) {
            w.write_record([
                (a.epoch + 1).to_string(),
                a.train_accuracy.to_string(),
                b.train_accuracy.to_string(),
                a.train_loss.to_string(),
                b.train_loss.to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn markdown(&self) -> String {
        let mut out = format!(
            "Epochs to reach {:.0}% of the final training accuracy (learning rate {}).\n\n",
            TARGET_FRACTION * 100.0,
            self.learning_rate
        );
        out += "| Seed | Dynamic Outlier | Outlier | Dynamic not slower | Final accuracy (dynamic / static) | Epochs to the common target (dynamic / static) |\n";
        out += "|---|---|---|---|---|---|\n";
        let show = |e: Option<usize>| e.map_or("never".to_string(), |e| e.to_string());
        for r in &self.runs {
            let last = |x: &ExperimentResult| x.epochs.last().map_or(0.0, |e| e.train_accuracy);
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {:.3} / {:.3} | {} / {} |",
                r.seed,
                r.dynamic_epochs,
                r.outlier_epochs,
                if r.dynamic_not_slower() { "yes" } else { "no" },
                last(&r.dynamic),
                last(&r.outlier),
                show(r.common_target_epochs.0),
                show(r.common_target_epochs.1)
            );
        }
        out +=
            "\nThe common target is the same fraction of the better of the two final accuracies.\n";
        let _ = writeln!(
            out,
            "\nDynamic Outlier not slower in {}/{} seeds.",
            self.dynamic_not_slower_count(),
            self.runs.len()
        );
        out
    }

    /// Writes `convergence.md` plus a CSV and an SVG plot per seed into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = vec![dir.join(SUMMARY_FILE)];
        write_atomic(&written[0], self.markdown().as_bytes())?;
        for r in &self.runs {
            let csv = dir.join(format!("convergence_seed_{}.csv", r.seed));
            write_atomic(&csv, Self::curve_csv(r)?.as_bytes())?;
            let svg = dir.join(format!("convergence_seed_{}.svg", r.seed));
            write_atomic(&svg, plot_svg(r).as_bytes())?;
            written.extend([csv, svg]);
        }
        Ok(written)
    }
}

/// Line plot of both training-accuracy curves, epoch 0 being the
/// pre-training evaluation.
pub fn plot_svg(run: &SeedConvergence) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let series = [
        ("Dynamic Outlier", "#d62728", &run.dynamic),
        ("Outlier", "#1f77b4", &run.outlier),
    ];
    let epochs = run.dynamic.epochs.len().max(1) as f64;
    let x = |e: f64| m + e / epochs * (w - 2.0 * m);
    let y = |a: f64| h - m - a.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">Training accuracy, seed {}</text>\n\
         <line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">epoch</text>\n",
        w / 2.0,
        run.seed,
        h - m,
        w - m,
        h - m,
        h - m,
        w / 2.0,
        h - 15.0
    );
    for tick in 0..=5 {
        let a = tick as f64 / 5.0;
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{a:.1}</text>",
            m - 5.0,
            y(a) + 4.0
        );
    }
    let step = (epochs / 10.0).ceil().max(1.0) as usize;
    for e in (0..=epochs as usize).step_by(step) {
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{e}</text>",
            x(e as f64),
            h - m + 15.0
        );
    }
    for (i, (name, color, r)) in series.iter().enumerate() {
        let points: Vec<String> = std::iter::once(r.initial.accuracy)
            .chain(r.epochs.iter().map(|e| e.train_accuracy))
            .enumerate()
            .map(|(e, a)| format!("{:.1},{:.1}", x(e as f64), y(a)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            points.join(" ")
        );
        let ly = m + 15.0 * i as f64;
        let _ = writeln!(
            out,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{}\" y=\"{}\">{name}</text>",
            w - m - 130.0,
            w - m - 110.0,
            w - m - 105.0,
            ly + 4.0
        );
    }
    out += "</svg>\n";
    out
}
