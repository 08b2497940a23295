//! End-to-end acceptance checks. Each test prints one line,
//! `criterion N: PASS|FAIL ...`, straight to stderr so it shows up even when
//! the test harness captures output.
//!
//! Criteria 1-3 and 6-8 are correctness properties and fail the test run when
//! violated. Criteria 4 and 5 are empirical orderings measured on the default
//! synthetic data; their verdict is always printed, and with
//! `SPARSEPOOL_STRICT=1` a FAIL also fails the test.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sparsepool::data::ingest_folder;
use sparsepool::harness::gradcheck::{run_gradcheck, GradcheckOptions, Scope, STEP};
use sparsepool::harness::{DataConfig, RunConfig};
use sparsepool::{cross_crop_pool, pool_forward, schedule_weights, Error, PoolMode, Schedule};
use sparsepool::{Shape4, Tensor4};

const BIN: &str = env!("CARGO_BIN_EXE_sparsepool");

fn verdict(n: u8, passed: bool, detail: &str) {
    let line = format!(
        "criterion {n}: {} {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn strict() -> bool {
    std::env::var("SPARSEPOOL_STRICT").is_ok_and(|v| v == "1")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn sparsepool(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn randn(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| rng.sample(StandardNormal)).unwrap()
}

/// Straightforward scalar loops over one spatial domain, written from the
/// operator definitions independently of the library.
fn oracle_pool(values: &[f64], mode: PoolMode, weights: (f64, f64)) -> f64 {
    let len = values.len() as f64;
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        sum += v;
        if v > max {
            max = v;
        }
    }
    let mean = sum / len;
    let mut sq = 0.0;
    for &v in values {
        sq += (v - mean) * (v - mean);
    }
    let std = (sq / len).sqrt();
    match mode {
        PoolMode::Average => mean,
        PoolMode::Max => max,
        PoolMode::Outlier { lambda } => {
            let threshold = mean + lambda * std;
            let (mut s, mut k) = (0.0, 0usize);
            for &v in values {
                if v >= threshold {
                    s += v;
                    k += 1;
                }
            }
            if k == 0 {
                max
            } else {
                s / k as f64
            }
        }
        PoolMode::DynamicOutlier { lambda } => {
            let threshold = mean + lambda * std;
            let (mut hi, mut lo) = (0.0, 0.0);
            for &v in values {
                if v >= threshold {
                    hi += v;
                } else {
                    lo += v;
                }
            }
            (weights.0 * hi + weights.1 * lo) / len
        }
    }
}

fn plane(t: &Tensor4<f64>, n: usize, c: usize) -> Vec<f64> {
    let s = t.shape();
    let mut v = Vec::with_capacity(s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            v.push(t.get(n, c, y, x));
        }
    }
    v
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let options = GradcheckOptions {
        cases: 20,
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(Scope::All, &options).unwrap();
    let elapsed = start.elapsed();
    let worst = report
        .operators
        .iter()
        .map(|o| o.max_relative_error)
        .fold(0.0f64, f64::max);
    let passed = report.passed
        && report.operators.len() == 10
        && report.operators.iter().all(|o| o.cases >= 20)
        && STEP == 1e-6
        && elapsed < Duration::from_secs(120);
    verdict(
        1,
        passed,
        &format!(
            "{} operators x 20 cases, worst relative error {worst:.2e} (< 1e-6), {:.1}s",
            report.operators.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(passed, "{report:#?}");
}

#[test]
fn criterion_2_analytic_degeneracies() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_a = 0.0f64;
    for _ in 0..20 {
        let s = Shape4::new(
            rng.random_range(1..=4),
            rng.random_range(1..=8),
            rng.random_range(1..=9),
            rng.random_range(1..=9),
        );
        let x = randn(s, &mut rng);
        let total = rng.random_range(1..=30);
        let sched = Schedule::new(0, total).unwrap();
        let lambda = rng.random_range(0.0..4.0);
        let (d, _) = pool_forward(&x, PoolMode::DynamicOutlier { lambda }, Some(&sched)).unwrap();
        let (a, _) = pool_forward(&x, PoolMode::Average, None).unwrap();
        for (u, v) in d.data().iter().zip(a.data()) {
            worst_a = worst_a.max((u - v).abs());
        }
    }
    let a_ok = worst_a <= 1e-12;

    let mut b_ok = true;
    for value in [-3.5f64, 0.0, 1e-3, 7.25, 1e6] {
        let x = Tensor4::filled(Shape4::new(2, 3, 4, 5), value).unwrap();
        for lambda in [0.0, 2.0, 5.0] {
            let (o, _) = pool_forward(&x, PoolMode::Outlier { lambda }, None).unwrap();
            let (a, _) = pool_forward(&x, PoolMode::Average, None).unwrap();
            let (m, _) = pool_forward(&x, PoolMode::Max, None).unwrap();
            for i in 0..o.data().len() {
                b_ok &= (o.data()[i] - a.data()[i]).abs() <= 1e-12;
                b_ok &= (o.data()[i] - m.data()[i]).abs() <= 1e-12;
            }
        }
    }

    let mut c_ok = true;
    for total in 1..=50 {
        c_ok &= schedule_weights(0, total).unwrap() == (1.0, 1.0);
        c_ok &= schedule_weights(total, total).unwrap() == (2.0, 0.0);
    }

    let (mut d_ok, mut checked) = (true, 0usize);
    let mut channel = 0;
    while checked < 1000 {
        let s = Shape4::new(1, 1, rng.random_range(2..=8), rng.random_range(2..=8));
        let x = randn(s, &mut rng);
        let lambda = rng.random_range(0.0..3.0);
        let (o, ctx) = pool_forward(&x, PoolMode::Outlier { lambda }, None).unwrap();
        channel += 1;
        if ctx.fallback_count() > 0 {
            continue;
        }
        let (a, _) = pool_forward(&x, PoolMode::Average, None).unwrap();
        let (m, _) = pool_forward(&x, PoolMode::Max, None).unwrap();
        let min = x.data().iter().copied().fold(f64::INFINITY, f64::min);
        let (a, o, m) = (a.get(0, 0), o.get(0, 0), m.get(0, 0));
        d_ok &= min <= a && a <= o && o <= m;
        checked += 1;
    }

    let passed = a_ok && b_ok && c_ok && d_ok;
    verdict(
        2,
        passed,
        &format!(
            "(a) dynamic at epoch 0 vs average max diff {worst_a:.1e}; (b) constant channels {}; \
             (c) schedule endpoints {}; (d) min <= avg <= outlier <= max on {checked} of {channel} \
             random channels without fallback {}",
            ok(b_ok),
            ok(c_ok),
            ok(d_ok)
        ),
    );
    assert!(passed);
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "violated"
    }
}

#[test]
fn criterion_3_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut worst_union) = (0.0f64, 0.0f64);
    let mut cases = 0;
    for case in 0..40 {
        let s = if case == 0 {
            Shape4::new(4, 16, 16, 16)
        } else {
            Shape4::new(
                rng.random_range(1..=4),
                rng.random_range(1..=16),
                rng.random_range(1..=16),
                rng.random_range(1..=16),
            )
        };
        let x = randn(s, &mut rng);
        let lambda = rng.random_range(0.0..3.0);
        let total = rng.random_range(1..=20);
        let epoch = rng.random_range(0..=total);
        let sched = Schedule::new(epoch, total).unwrap();
        let weights = sched.weights();
        for mode in [
            PoolMode::Average,
            PoolMode::Max,
            PoolMode::Outlier { lambda },
            PoolMode::DynamicOutlier { lambda },
        ] {
            let (y, _) = pool_forward(&x, mode, Some(&sched)).unwrap();
            for n in 0..s.n {
                for c in 0..s.c {
                    let expect = oracle_pool(&plane(&x, n, c), mode, weights);
                    worst = worst.max((y.get(n, c) - expect).abs());
                }
            }

            // Four crops against one map holding them side by side.
            let crops: Vec<Tensor4<f64>> = (0..4).map(|_| randn(s, &mut rng)).collect();
            let refs: Vec<&Tensor4<f64>> = crops.iter().collect();
            let union = Tensor4::from_fn(Shape4::new(s.n, s.c, s.h, 4 * s.w), |n, c, y, x| {
                crops[x / s.w].get(n, c, y, x % s.w)
            })
            .unwrap();
            let (a, _) = cross_crop_pool(&refs, mode, Some(&sched)).unwrap();
            let (b, _) = pool_forward(&union, mode, Some(&sched)).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                worst_union = worst_union.max((u - v).abs());
            }
            cases += 1;
        }
    }
    let passed = worst <= 1e-10 && worst_union <= 1e-12;
    verdict(
        3,
        passed,
        &format!(
            "{cases} mode/tensor cases up to 4x16x16x16: max diff to oracle {worst:.1e} (<= 1e-10), \
             cross-crop vs union {worst_union:.1e} (<= 1e-12)"
        ),
    );
    assert!(passed);
}

fn read_csv(path: &Path) -> Vec<HashMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            headers
                .iter()
                .zip(rec.iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

#[test]
fn criterion_4_table_analog() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablation");
    let start = Instant::now();
    let run = sparsepool(&[
        "ablate",
        "--seeds",
        "0,1,2,3,4",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    let elapsed = start.elapsed();
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let mut acc: HashMap<(String, String, u64), f64> = HashMap::new();
    for row in read_csv(&out.join("ablation.csv")) {
        assert_eq!(row["status"], "ok");
        acc.insert(
            (
                row["branch"].clone(),
                row["pool"].clone(),
                row["seed"].parse().unwrap(),
            ),
            row["test_accuracy"].parse().unwrap(),
        );
    }
    assert_eq!(acc.len(), 45);
    let rows = ["global_only", "local_only", "multi_res"];
    let cols = ["average", "max", "dynamic_outlier"];
    let get = |b: &str, p: &str, s: u64| acc[&(b.to_string(), p.to_string(), s)];
    let mut a_seeds = 0;
    let mut b_seeds = 0;
    let mut row_wins = [0; 3];
    let mut col_wins = [0; 3];
    for seed in 0..5 {
        let mut all_rows = true;
        for (i, b) in rows.iter().enumerate() {
            let d = get(b, "dynamic_outlier", seed);
            let win = d > get(b, "average", seed) && d > get(b, "max", seed);
            row_wins[i] += win as usize;
            all_rows &= win;
        }
        a_seeds += all_rows as usize;
        let mut all_cols = true;
        for (j, p) in cols.iter().enumerate() {
            let win = get("multi_res", p, seed) > get("global_only", p, seed);
            col_wins[j] += win as usize;
            all_cols &= win;
        }
        b_seeds += all_cols as usize;
    }
    let in_time = elapsed < Duration::from_secs(30 * 60);
    let passed = a_seeds >= 4 && b_seeds >= 4 && in_time;
    verdict(
        4,
        passed,
        &format!(
            "(a) dynamic outlier best in every row in {a_seeds}/5 seeds \
             (per row global/local/multi {}/{}/{}); (b) multi-res above global-only in every \
             column in {b_seeds}/5 seeds (per column avg/max/dyn {}/{}/{}); {:.0}s",
            row_wins[0],
            row_wins[1],
            row_wins[2],
            col_wins[0],
            col_wins[1],
            col_wins[2],
            elapsed.as_secs_f64()
        ),
    );
    assert!(in_time);
    if strict() {
        assert!(passed);
    }
}

#[test]
fn criterion_5_convergence_analog() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("convergence");
    let run = sparsepool(&[
        "convergence",
        "--seeds",
        "0,1,2,3,4",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let epochs_to_90 = |curve: &[f64]| -> usize {
        let last = *curve.last().unwrap();
        curve.iter().position(|&a| a >= 0.9 * last).unwrap() + 1
    };
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..5 {
        let rows = read_csv(&out.join(format!("convergence_seed_{seed}.csv")));
        assert!(rows.len() >= 2, "initial row plus at least one epoch");
        let curve =
            |col: &str| -> Vec<f64> { rows[1..].iter().map(|r| r[col].parse().unwrap()).collect() };
        let d = epochs_to_90(&curve("dynamic_train_accuracy"));
        let s = epochs_to_90(&curve("outlier_train_accuracy"));
        wins += (d <= s) as usize;
        detail.push(format!("{d}/{s}"));
    }
    let passed = wins >= 4;
    verdict(
        5,
        passed,
        &format!(
            "dynamic reached 90% of its final training accuracy no later than static outlier in \
             {wins}/5 seeds (epochs dynamic/static: {})",
            detail.join(", ")
        ),
    );
    if strict() {
        assert!(passed);
    }
}

#[test]
fn criterion_6_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    let mut checkpoints = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let r = sparsepool(&[
            "train",
            "--epochs",
            "3",
            "--seed",
            "11",
            "--output-dir",
            out.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        let mut v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join("result.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("wall_clock_seconds");
        results.push(v);
        checkpoints.push(std::fs::read(out.join("model.spck")).unwrap());
    }
    let losses: Vec<f64> = results[0]["epochs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["train_loss"].as_f64().unwrap())
        .collect();
    let passed = results[0] == results[1] && checkpoints[0] == checkpoints[1] && losses.len() == 3;
    verdict(
        6,
        passed,
        &format!(
            "two runs of one config and seed: identical result JSON apart from wall clock and \
             identical checkpoint bytes ({}); losses {losses:?}",
            ok(passed)
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_7_split_integrity() {
    let root = fixtures().join("field");
    let leaky = ingest_folder(&root, Some(&root.join("leaky.csv")));
    let compliant = ingest_folder(&root, Some(&root.join("compliant.csv")));
    let rejected = matches!(
        &leaky,
        Err(Error::SplitLeakage { class, plot }) if class == "class_00" && plot == "plot_02"
    );
    let accepted = compliant.as_ref().is_ok_and(|i| i.len() == 10);

    // The CLI refuses to train on the leaky manifest with a configuration error.
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("leaky.toml");
    let leaky_config = RunConfig {
        data: DataConfig::Folder {
            root: root.clone(),
            manifest: Some(root.join("leaky.csv")),
        },
        ..Default::default()
    };
    std::fs::write(&config, leaky_config.to_toml()).unwrap();
    let out = dir.path().join("run");
    let r = sparsepool(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    let cli_rejects = r.status.code() == Some(2) && !out.join("result.json").exists();

    let passed = rejected && accepted && cli_rejects;
    verdict(
        7,
        passed,
        &format!(
            "leaky manifest rejected ({}), compliant fixture accepted ({}), CLI exit 2 on leakage ({})",
            ok(rejected),
            ok(accepted),
            ok(cli_rejects)
        ),
    );
    assert!(
        passed,
        "{leaky:?} {compliant:?} {}",
        String::from_utf8_lossy(&r.stderr)
    );
}

#[test]
fn criterion_8_cli_contract() {
    let fixture = fixtures().join("spike.spt4");
    let f = fixture.to_str().unwrap();
    let pooled = sparsepool(&["pool", f, "--mode", "outlier", "--lambda", "2"]);
    let exact = pooled.status.code() == Some(0) && pooled.stdout == b"8.0\n";

    let success = sparsepool(&["gradcheck", "--scope", "pooling", "--cases", "2"]);
    let failure = sparsepool(&[
        "gradcheck",
        "--scope",
        "pooling",
        "--cases",
        "2",
        "--corrupt-backward",
        "1.01",
    ]);
    let bad_mode = sparsepool(&["pool", f, "--mode", "median"]);
    let bad_lambda = sparsepool(&["pool", f, "--lambda", "-1"]);
    let missing = sparsepool(&["train", "--config", "/nonexistent/config.toml"]);
    let codes = [
        success.status.code(),
        failure.status.code(),
        bad_mode.status.code(),
        bad_lambda.status.code(),
        missing.status.code(),
    ];
    let codes_ok = codes == [Some(0), Some(1), Some(2), Some(2), Some(2)];
    let passed = exact && codes_ok;
    verdict(
        8,
        passed,
        &format!(
            "pool on the [0 x7, 8] fixture with lambda 2 printed {:?}; exit codes \
             success/failure/bad mode/bad lambda/missing config = {codes:?}",
            String::from_utf8_lossy(&pooled.stdout).trim()
        ),
    );
    assert!(passed);
}
