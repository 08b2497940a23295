//! Experiment orchestration: run configs, seeded training, the crop/pooling
//! ablation grid, convergence comparisons, reports and gradient checks.

pub mod ablate;
pub mod config;
pub mod convergence;
pub mod gradcheck;
pub mod report;
pub mod train;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub use ablate::{run_ablation, AblationReport, CellRun, GRID_POOLS};
pub use config::{DataConfig, ModelConfig, PoolConfig, RunConfig, TrainConfig};
pub use convergence::{run_convergence, ConvergenceReport, SeedConvergence};
pub use gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport, OperatorReport, Scope};
pub use train::{
    evaluate, load_dataset, run, run_on, train, EpochRecord, Evaluation, ExperimentResult,
    NanInjection, TrainOptions,
};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SPARSEPOOL_THREADS";

/// Worker threads: `SPARSEPOOL_THREADS` if set to a positive integer,
/// otherwise the available parallelism.
pub fn thread_limit() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Writes to a sibling temporary file and renames it into place, so readers
/// never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs `f` on a thread pool capped by [`thread_limit`].
pub fn with_thread_limit<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(thread_limit())
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Caps the global thread pool at [`thread_limit`]. Call once, before any
/// parallel work; later calls leave the existing pool in place.
pub fn init_global_threads() {
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_limit())
        .build_global();
}
