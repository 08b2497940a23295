//! Central finite-difference checks of every backward pass at f64.
//!
//! Each case draws a random shape and input, runs the forward once to fix
//! pooling selections and rectifier gates, and compares the analytic
//! gradient of `<r, f(x)>` for a random probe `r` with central differences
//! of the frozen forward. The error of a case is norm-wise:
//! `|g_numeric - g_analytic| / max(|g_numeric|, |g_analytic|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    BranchKind, BranchSpec, ConvBlock, Model, ModelInput, ModelSpec, TrunkSpec, CROPS_PER_IMAGE,
};
use crate::nn::{relu_backward, relu_forward, softmax_xent, Conv2d, Dense};
use crate::pooling::{cross_crop_backward, cross_crop_pool, pool_backward, pool_forward};
use crate::pooling::{PoolContext, PoolMode, Schedule};
use crate::tensor::{Matrix, Shape4, Tensor4};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-6;
pub const DEFAULT_CASES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Pooling,
    Layers,
    Model,
    All,
}

impl Scope {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "pooling" => Ok(Scope::Pooling),
            "layers" => Ok(Scope::Layers),
            "model" => Ok(Scope::Model),
            "all" => Ok(Scope::All),
            other => Err(Error::Config(format!(
                "unknown gradcheck scope {other:?}; expected pooling, layers, model or all"
            ))),
        }
    }

    fn operators(self) -> &'static [Operator] {
        use Operator::*;
        match self {
            Scope::Pooling => &[Average, Max, Outlier, DynamicOutlier, CrossCropPool],
            Scope::Layers => &[Conv, Relu, Dense, SoftmaxXent],
            Scope::Model => &[MultiResModel],
            Scope::All => &[
                Average,
                Max,
                Outlier,
                DynamicOutlier,
                CrossCropPool,
                Conv,
                Relu,
                Dense,
                SoftmaxXent,
                MultiResModel,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Operator {
    Average,
    Max,
    Outlier,
    DynamicOutlier,
    CrossCropPool,
    Conv,
    Relu,
    Dense,
    SoftmaxXent,
    MultiResModel,
}

impl Operator {
    fn name(self) -> &'static str {
        match self {
            Operator::Average => "average_pool",
            Operator::Max => "max_pool",
            Operator::Outlier => "outlier_pool",
            Operator::DynamicOutlier => "dynamic_outlier_pool",
            Operator::CrossCropPool => "cross_crop_pool",
            Operator::Conv => "conv2d",
            Operator::Relu => "relu",
            Operator::Dense => "dense",
            Operator::SoftmaxXent => "softmax_xent",
            Operator::MultiResModel => "multires_model",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub cases: usize,
    pub seed: u64,
    /// Scales every analytic gradient by this factor before comparison.
    /// Anything but 1 is a negative control that must fail.
    pub corrupt_backward: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            cases: DEFAULT_CASES,
            seed: 0,
            corrupt_backward: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorReport {
    pub operator: String,
    pub cases: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub scope: Scope,
    pub step: f64,
    pub tolerance: f64,
    pub operators: Vec<OperatorReport>,
    pub passed: bool,
}

pub fn run_gradcheck(scope: Scope, options: &GradcheckOptions) -> Result<GradcheckReport> {
    if options.cases == 0 {
        return Err(Error::Config("gradcheck needs at least one case".into()));
    }
    let mut operators = Vec::new();
    for &op in scope.operators() {
        let mut worst = 0.0f64;
        for case in 0..options.cases {
            let seed = options.seed ^ ((op as u64) << 32) ^ case as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (f, x, mut analytic) = build_case(op, &mut rng)?;
            for g in analytic.iter_mut() {
                *g *= options.corrupt_backward;
            }
            let numeric = central_differences(&*f, &x)?;
            let err = relative_error(&numeric, &analytic);
            // NaN must count as a failure.
            worst = if err.is_nan() {
                f64::NAN
            } else {
                worst.max(err)
            };
        }
        operators.push(OperatorReport {
            operator: op.name().into(),
            cases: options.cases,
            max_relative_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(GradcheckReport {
        scope,
        step: STEP,
        tolerance: TOLERANCE,
        passed: operators.iter().all(|o| o.passed),
        operators,
    })
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

type Objective = Box<dyn Fn(&[f64]) -> Result<f64>>;

fn central_differences(f: &dyn Fn(&[f64]) -> Result<f64>, x: &[f64]) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let up = f(&probe)?;
        probe[i] = x[i] - STEP;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * STEP));
    }
    Ok(out)
}

fn randn(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_shape(rng: &mut ChaCha8Rng) -> Shape4 {
    Shape4::new(
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(1..=6),
        rng.random_range(1..=6),
    )
}

fn random_schedule(rng: &mut ChaCha8Rng) -> Result<Schedule> {
    let total = rng.random_range(1..=20);
    Schedule::new(rng.random_range(0..=total), total)
}

fn build_case(op: Operator, rng: &mut ChaCha8Rng) -> Result<(Objective, Vec<f64>, Vec<f64>)> {
    let lambda = rng.random_range(0.0..3.0);
    match op {
        Operator::Average => pooling_case(PoolMode::Average, 1, rng),
        Operator::Max => pooling_case(PoolMode::Max, 1, rng),
        Operator::Outlier => pooling_case(PoolMode::Outlier { lambda }, 1, rng),
        Operator::DynamicOutlier => pooling_case(PoolMode::DynamicOutlier { lambda }, 1, rng),
        Operator::CrossCropPool => {
            let mode = [
                PoolMode::Average,
                PoolMode::Max,
                PoolMode::Outlier { lambda },
                PoolMode::DynamicOutlier { lambda },
            ][rng.random_range(0..4)];
            pooling_case(mode, CROPS_PER_IMAGE, rng)
        }
        Operator::Conv => conv_case(rng),
        Operator::Relu => relu_case(rng),
        Operator::Dense => dense_case(rng),
        Operator::SoftmaxXent => softmax_case(rng),
        Operator::MultiResModel => model_case(rng),
    }
}

fn split_crops(x: &[f64], shape: Shape4, crops: usize) -> Result<Vec<Tensor4<f64>>> {
    x.chunks(shape.len())
        .take(crops)
        .map(|c| Tensor4::new(shape, c.to_vec()))
        .collect()
}

fn pooling_case(
    mode: PoolMode,
    crops: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Objective, Vec<f64>, Vec<f64>)> {
    let shape = random_shape(rng);
    let schedule = mode
        .needs_schedule()
        .then(|| random_schedule(rng))
        .transpose()?;
    let x = randn(shape.len() * crops, rng);
    let maps = split_crops(&x, shape, crops)?;
    let refs: Vec<&Tensor4<f64>> = maps.iter().collect();
    let (y, ctx) = if crops == 1 {
        pool_forward(refs[0], mode, schedule.as_ref())?
    } else {
        cross_crop_pool(&refs, mode, schedule.as_ref())?
    };
    let r = Matrix::new(y.rows(), y.cols(), randn(y.rows() * y.cols(), rng))?;
    let analytic: Vec<f64> = if crops == 1 {
        pool_backward(&r, &ctx, shape)?.into_data()
    } else {
        cross_crop_backward(&r, &ctx)?
            .into_iter()
            .flat_map(|t| t.into_data())
            .collect()
    };
    let frozen: PoolContext = ctx;
    let f = move |v: &[f64]| -> Result<f64> {
        let maps = split_crops(v, shape, crops)?;
        let refs: Vec<&Tensor4<f64>> = maps.iter().collect();
        Ok(dot(frozen.replay(&refs)?.data(), r.data()))
    };
    Ok((Box::new(f), x, analytic))
}

fn conv_case(rng: &mut ChaCha8Rng) -> Result<(Objective, Vec<f64>, Vec<f64>)> {
    let kernel = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=kernel / 2);
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=4);
    let side = |rng: &mut ChaCha8Rng| rng.random_range(kernel.max(2)..=7);
    let shape = Shape4::new(rng.random_range(1..=2), cin, side(rng), side(rng));
    let mut conv = Conv2d::<f64>::new(cin, cout, kernel, stride, padding, rng)?;
    conv.bias = randn(cout, rng);
    let x = Tensor4::new(shape, randn(shape.len(), rng))?;
    let (y, cache) = conv.forward(&x)?;
    let r = randn(y.shape().len(), rng);
    let grads = conv.backward(&Tensor4::new(y.shape(), r.clone())?, &cache, true)?;
    let (nx, nw) = (shape.len(), conv.weight.shape().len());
    let mut flat = x.data().to_vec();
    flat.extend_from_slice(conv.weight.data());
    flat.extend_from_slice(&conv.bias);
    let mut analytic = grads.input.expect("input gradient requested").into_data();
    analytic.extend(grads.weight);
    analytic.extend(grads.bias);
    let f = move |v: &[f64]| -> Result<f64> {
        let mut c = conv.clone();
        c.weight = Tensor4::new(c.weight.shape(), v[nx..nx + nw].to_vec())?;
        c.bias = v[nx + nw..].to_vec();
        let (y, _) = c.forward(&Tensor4::new(shape, v[..nx].to_vec())?)?;
        Ok(dot(y.data(), &r))
    };
    Ok((Box::new(f), flat, analytic))
}

fn relu_case(rng: &mut ChaCha8Rng) -> Result<(Objective, Vec<f64>, Vec<f64>)> {
    let shape = random_shape(rng);
    // Keep inputs well away from the kink, where the subgradient is a choice.
    let x: Vec<f64> = randn(shape.len(), rng)
        .into_iter()
        .map(|v| {
            if v.abs() < 0.05 {
                v.signum() * 0.1 + v
            } else {
                v
            }
        })
        .collect();
    let t = Tensor4::new(shape, x.clone())?;
    let r = randn(shape.len(), rng);
    let analytic = relu_backward(&Tensor4::new(shape, r.clone())?, &t)?.into_data();
    let f = move |v: &[f64]| -> Result<f64> {
        Ok(dot(
            relu_forward(&Tensor4::new(shape, v.to_vec())?).data(),
            &r,
        ))
    };
    Ok((Box::new(f), x, analytic))
}

fn dense_case(rng: &mut ChaCha8Rng) -> Result<(Objective, Vec<f64>, Vec<f64>)> {
    let (rows, din, dout) = (
        rng.random_range(1..=4),
        rng.random_range(1..=6),
        rng.random_range(1..=5),
    );
    let mut layer = Dense::<f64>::new(din, dout, rng)?;
    layer.bias = randn(dout, rng);
    let x = Matrix::new(rows, din, randn(rows * din, rng))?;
    let r = Matrix::new(rows, dout, randn(rows * dout, rng))?;
    let grads = layer.backward(&x, &r)?;
    let (nx, nw) = (rows * din, dout * din);
    let mut flat = x.data().to_vec();
    flat.extend_from_slice(layer.weight.data());
    flat.extend_from_slice(&layer.bias);
    let mut analytic = grads.input.data().to_vec();
    analytic.extend(grads.weight);
    analytic.extend(grads.bias);
    let f = move |v: &[f64]| -> Result<f64> {
        let mut l = layer.clone();
        l.weight = Matrix::new(dout, din, v[nx..nx + nw].to_vec())?;
        l.bias = v[nx + nw..].to_vec();
        let y = l.forward(&Matrix::new(rows, din, v[..nx].to_vec())?)?;
        Ok(dot(y.data(), r.data()))
    };
    Ok((Box::new(f), flat, analytic))
}

fn softmax_case(rng: &mut ChaCha8Rng) -> Result<(Objective, Vec<f64>, Vec<f64>)> {
    let (rows, k) = (rng.random_range(1..=5), rng.random_range(2..=6));
    let x: Vec<f64> = randn(rows * k, rng).iter().map(|v| 3.0 * v).collect();
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k)).collect();
    let (_, grad) = softmax_xent(&Matrix::new(rows, k, x.clone())?, &labels)?;
    let analytic = grad.data().to_vec();
    let f = move |v: &[f64]| -> Result<f64> {
        Ok(softmax_xent(&Matrix::new(rows, k, v.to_vec())?, &labels)?.0)
    };
    Ok((Box::new(f), x, analytic))
}

fn model_case(rng: &mut ChaCha8Rng) -> Result<(Objective, Vec<f64>, Vec<f64>)> {
    let lambda = rng.random_range(0.5..3.0);
    let mode = [
        PoolMode::Average,
        PoolMode::Max,
        PoolMode::Outlier { lambda },
        PoolMode::DynamicOutlier { lambda },
    ][rng.random_range(0..4)];
    let side = rng.random_range(4..=8);
    let block = |channels, stride| ConvBlock {
        channels,
        kernel: 3,
        stride,
        padding: 1,
    };
    let spec = ModelSpec {
        branch: BranchSpec {
            kind: BranchKind::MultiRes,
            global_input_size: side,
            local_crop_size: side,
            crops_per_image: CROPS_PER_IMAGE,
            pool_mode: mode,
        },
        trunk: TrunkSpec {
            in_channels: rng.random_range(1..=3),
            blocks: vec![
                block(rng.random_range(2..=4), 1),
                block(rng.random_range(2..=4), 2),
            ],
        },
        num_classes: rng.random_range(2..=4),
    };
    let schedule = mode
        .needs_schedule()
        .then(|| random_schedule(rng))
        .transpose()?;
    let mut model = Model::<f64>::new(spec.clone(), rng)?;
    let batch = rng.random_range(1..=2);
    let shape = Shape4::new(batch, spec.trunk.in_channels, side, side);
    let image = |rng: &mut ChaCha8Rng| Tensor4::new(shape, randn(shape.len(), rng));
    let input = ModelInput {
        global: Some(image(rng)?),
        local: Some(
            (0..CROPS_PER_IMAGE)
                .map(|_| image(rng))
                .collect::<Result<_>>()?,
        ),
    };
    // Random biases so that no rectifier input sits near zero by construction.
    for slot in model.params_mut() {
        if slot.name.ends_with(".bias") {
            for v in slot.value.iter_mut() {
                *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let (logits, ctx) = model.forward(&input, schedule.as_ref())?;
    let r = Matrix::new(
        logits.rows(),
        logits.cols(),
        randn(logits.rows() * logits.cols(), rng),
    )?;
    let analytic: Vec<f64> = model.backward(&r, &ctx)?.tensors.concat();
    let flat: Vec<f64> = model.params().concat();
    let f = move |v: &[f64]| -> Result<f64> {
        let mut m = model.clone();
        let mut offset = 0;
        for slot in m.params_mut() {
            let len = slot.value.len();
            slot.value.copy_from_slice(&v[offset..offset + len]);
            offset += len;
        }
        Ok(dot(m.forward_frozen(&input, &ctx)?.data(), r.data()))
    };
    Ok((Box::new(f), flat, analytic))
}
