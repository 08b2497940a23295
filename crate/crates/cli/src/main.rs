use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparsepool::data::generate;
use sparsepool::harness::report;
use sparsepool::harness::{
    init_global_threads, run, run_ablation, run_convergence, run_gradcheck, write_atomic,
    DataConfig, GradcheckOptions, NanInjection, RunConfig, Scope, TrainOptions,
};
use sparsepool::tensor::spt4;
use sparsepool::{pool_forward, Error, PoolMode, Schedule, Tensor4};

/// Criterion or test failure: gradient check, training abort, failed cells.
const EXIT_FAILURE: u8 = 1;
/// Invalid configuration, arguments or input files.
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(
    name = "sparsepool",
    version,
    about = "Outlier pooling experiments: gradient checks, pooling, training and ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference checks of every backward pass; prints a JSON report.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = sparsepool::harness::gradcheck::DEFAULT_CASES)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Scale analytic gradients by this factor (negative control).
        #[arg(long, hide = true, default_value_t = 1.0)]
        corrupt_backward: f64,
    },
    /// Global pooling of an SPT4 tensor; prints the N x C features as CSV.
    Pool {
        input: PathBuf,
        /// avg, max, outlier or dynamic.
        #[arg(long, default_value = "outlier")]
        mode: String,
        #[arg(long, default_value_t = sparsepool::pooling::DEFAULT_LAMBDA)]
        lambda: f64,
        /// Current epoch, for dynamic outlier pooling.
        #[arg(long, default_value_t = 0)]
        epoch: usize,
        /// Total epochs, for dynamic outlier pooling.
        #[arg(long, default_value_t = 1)]
        total_epochs: usize,
        /// Write the 0/1 selection mask, shaped like the input, as SPT4.
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Writes the synthetic dataset of a config as PNG folders with an index.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One seeded training run; writes config, checkpoint and result JSON.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Inject a NaN gradient at `epoch,batch,param` to exercise the abort path.
        #[arg(long, hide = true, value_parser = parse_injection)]
        inject_nan: Option<NanInjection>,
    },
    /// The crop strategy by pooling grid over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Exit 1 unless both grid orderings hold in at least this many seeds.
        #[arg(long)]
        require: Option<usize>,
    },
    /// Dynamic against static outlier pooling training curves.
    Convergence {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Exit 1 unless dynamic is not slower in at least this many seeds.
        #[arg(long)]
        require: Option<usize>,
    },
    /// Summarizes the result JSON files below a directory as markdown.
    Report {
        dir: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; the built-in default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    pool: Option<String>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.output_dir {
            c.train.output_dir = d.clone();
        }
        if let Some(e) = self.epochs {
            c.train.epochs = e;
        }
        if let Some(l) = self.lambda {
            c.pool.lambda = l;
        }
        if let Some(p) = &self.pool {
            c.pool.mode = p.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn parse_injection(s: &str) -> Result<NanInjection, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [epoch, batch, param] => Ok(NanInjection {
            epoch,
            batch,
            param,
        }),
        _ => Err("expected epoch,batch,param".into()),
    }
}

enum Failure {
    Error(Error),
    /// A check that ran to completion but did not pass.
    Criterion(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Format(_)
        | Error::ScheduleExhausted { .. }
        | Error::Dataset(_)
        | Error::SplitLeakage { .. }
        | Error::ImageTooSmall { .. }
        | Error::Image { .. }
        | Error::Io { .. }
        | Error::IoBare(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gradcheck {
            scope,
            cases,
            seed,
            output,
            corrupt_backward,
        } => {
            let options = GradcheckOptions {
                cases,
                seed,
                corrupt_backward,
            };
            let report = run_gradcheck(Scope::parse(&scope)?, &options)?;
            let text = json(&report);
            println!("{text}");
            if let Some(p) = output {
                write_atomic(&p, text.as_bytes())?;
            }
            if !report.passed {
                return Err(Failure::Criterion("gradient check failed".into()));
            }
        }
        Command::Pool {
            input,
            mode,
            lambda,
            epoch,
            total_epochs,
            mask_out,
        } => {
            let mode = PoolMode::parse(&mode, lambda)?;
            let schedule = mode
                .needs_schedule()
                .then(|| Schedule::new(epoch, total_epochs))
                .transpose()?;
            let x: Tensor4<f64> = spt4::load(&input)?;
            let (y, ctx) = pool_forward(&x, mode, schedule.as_ref())?;
            for r in 0..y.rows() {
                let row: Vec<String> = y.row(r).iter().map(|v| format!("{v:?}")).collect();
                println!("{}", row.join(","));
            }
            if ctx.fallback_count() > 0 {
                log::info!(
                    "{} of {} channels fell back to max",
                    ctx.fallback_count(),
                    y.rows() * y.cols()
                );
            }
            if let Some(p) = mask_out {
                let mask = ctx.mask_tensors().pop().expect("one map");
                spt4::save(&p, &mask)?;
            }
        }
        Command::Synth { config, seed, out } => {
            let mut c = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                c = c.with_seed(s);
            }
            let DataConfig::Synth(spec) = &c.data else {
                return Err(Error::Config("the config's [data] source is not synth".into()).into());
            };
            let data = generate(spec)?;
            data.write_folder(&out)?;
            println!(
                "wrote {} images of {} classes to {}",
                data.samples.len(),
                spec.num_classes,
                out.display()
            );
        }
        Command::Train {
            run: args,
            seed,
            inject_nan,
        } => {
            let mut c = args.load()?;
            if let Some(s) = seed {
                c = c.with_seed(s);
            }
            let result = run(&c, &TrainOptions { inject_nan })?;
            println!("{}", json(&result));
            eprintln!(
                "test accuracy {:.4}; outputs in {}",
                result.test.accuracy,
                c.train.output_dir.display()
            );
        }
        Command::Ablate {
            run: args,
            seeds,
            require,
        } => {
            let c = args.load()?;
            let report = run_ablation(&c, &seeds)?;
            report.write(&c.train.output_dir)?;
            print!("{}", report.markdown());
            let failed = report.failures().len();
            if failed > 0 {
                return Err(Failure::Criterion(format!("{failed} cell(s) failed")));
            }
            if let Some(k) = require {
                let o = report.orderings();
                let d = o.iter().filter(|s| s.dynamic_best_everywhere()).count();
                let m = o.iter().filter(|s| s.multires_better_everywhere()).count();
                if d < k || m < k {
                    return Err(Failure::Criterion(format!(
                        "orderings held in {d} and {m} seeds, {k} required"
                    )));
                }
            }
        }
        Command::Convergence {
            run: args,
            seeds,
            require,
        } => {
            let c = args.load()?;
            let report = run_convergence(&c, &seeds)?;
            report.write(&c.train.output_dir)?;
            print!("{}", report.markdown());
            if let Some(k) = require {
                let n = report.dynamic_not_slower_count();
                if n < k {
                    return Err(Failure::Criterion(format!(
                        "dynamic not slower in {n} seeds, {k} required"
                    )));
                }
            }
        }
        Command::Report { dir, output } => {
            let r = report::collect(&dir)?;
            for w in &r.warnings {
                log::warn!("{w}");
            }
            let md = r.markdown();
            print!("{md}");
            if let Some(p) = output {
                write_atomic(Path::new(&p), md.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_global_threads();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Criterion(m)) => {
            eprintln!("failed: {m}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
