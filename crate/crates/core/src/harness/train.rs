use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DataConfig, RunConfig};
use super::write_atomic;
use crate::data::{generate, load_batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{make_crop_plan, BranchKind, Model, ModelSpec, Phase};
use crate::nn::{argmax_rows, softmax_xent, Sgd};
use crate::pooling::Schedule;

pub const RESULT_FILE: &str = "result.json";
pub const CHECKPOINT_FILE: &str = "model.spck";
pub const CONFIG_FILE: &str = "config.toml";

const EVAL_BATCH: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Share of pooled `(image, channel)` domains where no location reached
    /// the outlier threshold; absent for average and max pooling.
    pub fallback_rate: Option<f64>,
    /// `(w1, w2)` used during the epoch, for dynamic outlier pooling.
    pub schedule_weights: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub fallback_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub fingerprint: String,
    pub seed: u64,
    pub branch: BranchKind,
    pub pool: String,
    pub lambda: Option<f64>,
    /// Training split evaluated with test-time crops before the first update.
    pub initial: Evaluation,
    pub epochs: Vec<EpochRecord>,
    pub test: Evaluation,
    pub wall_clock_seconds: f64,
}

impl ExperimentResult {
    pub fn test_accuracy(&self) -> f64 {
        self.test.accuracy
    }

    /// Same result apart from timing.
    pub fn same_outcome(&self, other: &ExperimentResult) -> bool {
        let mut a = self.clone();
        a.wall_clock_seconds = other.wall_clock_seconds;
        a == *other
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Replaces one gradient with NaN at a given step, to exercise the abort path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NanInjection {
    pub epoch: usize,
    pub batch: usize,
    pub param: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub inject_nan: Option<NanInjection>,
}

pub fn load_dataset(data: &DataConfig) -> Result<Dataset> {
    match data {
        DataConfig::Synth(spec) => Ok(generate(spec)?.into_dataset()),
        DataConfig::Folder { root, manifest } => Dataset::load(root, manifest.as_deref()),
    }
}

pub fn model_spec_for(config: &RunConfig, dataset: &Dataset) -> Result<ModelSpec> {
    config.model_spec(dataset.num_classes(), dataset.normalization.channels())
}

/// Evaluates with test-time crops (centre crop, the four centre quadrants).
pub fn evaluate(
    model: &Model<f32>,
    dataset: &Dataset,
    ids: &[usize],
    schedule: Option<&Schedule>,
) -> Result<Evaluation> {
    let spec = model.spec().branch;
    let k = model.spec().num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut loss, mut hits) = (0.0, 0usize);
    let mut class_hits = vec![0usize; k];
    let mut class_total = vec![0usize; k];
    let (mut fallbacks, mut planes) = (0usize, 0usize);
    for chunk in ids.chunks(EVAL_BATCH) {
        let plans = chunk
            .iter()
            .map(|&i| {
                let img = &dataset.images[i];
                make_crop_plan(img.width(), img.height(), &spec, Phase::Test, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (input, labels) = load_batch(dataset, chunk, &plans, &spec)?;
        let (logits, ctx) = model.forward(&input, schedule)?;
        let (l, _) = softmax_xent(&logits, &labels)?;
        loss += l * chunk.len() as f64;
        for (p, &y) in argmax_rows(&logits).into_iter().zip(&labels) {
            class_total[y] += 1;
            if p == y {
                hits += 1;
                class_hits[y] += 1;
            }
        }
        let (f, p) = ctx.fallback_counts();
        fallbacks += f;
        planes += p;
    }
    let n = ids.len().max(1) as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: hits as f64 / n,
        per_class_accuracy: class_hits
            .iter()
            .zip(&class_total)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect(),
        fallback_rate: spec
            .pool_mode
            .lambda()
            .map(|_| fallbacks as f64 / planes.max(1) as f64),
    })
}

/// Seeded end-to-end training on an already loaded dataset.
///
/// The run's random stream initializes the model, then per epoch shuffles
/// the training ids and draws each image's crop plan. Pooling never draws
/// from it, so runs differing only in pooling mode see identical batches.
pub fn train(
    config: &RunConfig,
    dataset: &Dataset,
    options: &TrainOptions,
) -> Result<(ExperimentResult, Model<f32>)> {
    config.validate()?;
    let start = Instant::now();
    let spec = model_spec_for(config, dataset)?;
    let mode = spec.branch.pool_mode;
    let epochs = config.train.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut model = Model::<f32>::new(spec.clone(), &mut rng)?;
    let mut sgd = Sgd::<f32>::new(config.sgd())?;
    let names = model.param_names();

    let mut train_ids = dataset.index.ids(Split::Train);
    let test_ids = dataset.index.ids(Split::Test);
    if train_ids.is_empty() || test_ids.is_empty() {
        return Err(Error::Dataset("both splits need at least one image".into()));
    }

    let initial_schedule = mode
        .needs_schedule()
        .then(|| Schedule::new(0, epochs))
        .transpose()?;
    let initial = evaluate(&model, dataset, &train_ids, initial_schedule.as_ref())?;

    let mut records = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let schedule = mode
            .needs_schedule()
            .then(|| Schedule::new(epoch, epochs))
            .transpose()?;
        train_ids.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        let (mut fallbacks, mut planes) = (0usize, 0usize);
        for (batch, chunk) in train_ids.chunks(config.train.batch_size).enumerate() {
            let plans = chunk
                .iter()
                .map(|&i| {
                    let img = &dataset.images[i];
                    make_crop_plan(
                        img.width(),
                        img.height(),
                        &spec.branch,
                        Phase::Train,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let (input, labels) = load_batch(dataset, chunk, &plans, &spec.branch)?;
            let (logits, ctx) = model.forward(&input, schedule.as_ref())?;
            if !logits.is_finite() {
                return Err(diverged("logits", epoch, batch, "head"));
            }
            let (loss, grad) = softmax_xent(&logits, &labels).map_err(|e| match e {
                Error::NonFinite { .. } => diverged("loss", epoch, batch, "loss"),
                other => other,
            })?;
            let mut grads = model.backward(&grad, &ctx)?;
            if let Some(inj) = options.inject_nan {
                if inj.epoch == epoch && inj.batch == batch {
                    if let Some(g) = grads.tensors.get_mut(inj.param).and_then(|t| t.first_mut()) {
                        *g = f32::NAN;
                    }
                }
            }
            if let Some(bad) = grads
                .tensors
                .iter()
                .position(|g| g.iter().any(|v| !v.is_finite()))
            {
                return Err(diverged("gradient", epoch, batch, &names[bad]));
            }
            sgd.step(model.params_mut(), &grads.tensors)?;

            loss_sum += loss * chunk.len() as f64;
            hits += argmax_rows(&logits)
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            let (f, p) = ctx.fallback_counts();
            fallbacks += f;
            planes += p;
        }
        let n = train_ids.len() as f64;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: hits as f64 / n,
            fallback_rate: mode
                .lambda()
                .map(|_| fallbacks as f64 / planes.max(1) as f64),
            schedule_weights: schedule.map(|s| s.weights()),
        };
        log::debug!(
            "{} {} seed {} epoch {epoch}: loss {:.4} acc {:.3}",
            spec.branch.kind.label(),
            mode.label(),
            config.train.seed,
            record.train_loss,
            record.train_accuracy
        );
        records.push(record);
    }

    // After training the schedule sits at its end point.
    let final_schedule = mode
        .needs_schedule()
        .then(|| Schedule::finished(epochs))
        .transpose()?;
    let test = evaluate(&model, dataset, &test_ids, final_schedule.as_ref())?;
    Ok((
        ExperimentResult {
            fingerprint: config.fingerprint(),
            seed: config.train.seed,
            branch: spec.branch.kind,
            pool: mode.label().to_string(),
            lambda: mode.lambda(),
            initial,
            epochs: records,
            test,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
        model,
    ))
}

fn diverged(what: &str, epoch: usize, batch: usize, layer: &str) -> Error {
    Error::TrainingDiverged {
        what: what.into(),
        epoch,
        batch,
        layer: layer.into(),
    }
}

/// Loads the data, trains, and writes `config.toml`, `model.spck` and
/// `result.json` into the configured output directory. Nothing is written
/// if training aborts.
pub fn run(config: &RunConfig, options: &TrainOptions) -> Result<ExperimentResult> {
    let dataset = load_dataset(&config.data)?;
    run_on(config, &dataset, options)
}

pub fn run_on(
    config: &RunConfig,
    dataset: &Dataset,
    options: &TrainOptions,
) -> Result<ExperimentResult> {
    let (result, model) = train(config, dataset, options)?;
    write_outputs(&config.train.output_dir, config, &result, &model)?;
    Ok(result)
}

fn write_outputs(
    dir: &Path,
    config: &RunConfig,
    result: &ExperimentResult,
    model: &Model<f32>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut ck = Vec::new();
    model.to_checkpoint().write(&mut ck)?;
    write_atomic(&dir.join(CHECKPOINT_FILE), &ck)?;
    write_atomic(&dir.join(CONFIG_FILE), config.to_toml().as_bytes())?;
    let json = serde_json::to_vec_pretty(result).expect("result is serializable");
    write_atomic(&dir.join(RESULT_FILE), &json)
}
