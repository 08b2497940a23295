use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::error::Error;
use crate::pooling::{PoolMode, Schedule};
use crate::tensor::{Matrix, Shape4, Tensor4};

fn spec(kind: BranchKind, mode: PoolMode) -> ModelSpec {
    ModelSpec {
        branch: BranchSpec {
            kind,
            global_input_size: 8,
            local_crop_size: 8,
            crops_per_image: CROPS_PER_IMAGE,
            pool_mode: mode,
        },
        trunk: TrunkSpec {
            in_channels: 3,
            blocks: vec![
                ConvBlock {
                    channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                ConvBlock {
                    channels: 5,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            ],
        },
        num_classes: 3,
    }
}

fn randn(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| rng.sample(StandardNormal)).unwrap()
}

fn input(kind: BranchKind, n: usize, rng: &mut ChaCha8Rng) -> ModelInput<f64> {
    let s = Shape4::new(n, 3, 8, 8);
    ModelInput {
        global: kind.uses_global().then(|| randn(s, rng)),
        local: kind
            .uses_local()
            .then(|| (0..4).map(|_| randn(s, rng)).collect()),
    }
}

fn random_grad(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    )
    .unwrap()
}

#[test]
fn feature_width_follows_branches() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in BranchKind::ALL {
        let model = Model::<f64>::new(spec(kind, PoolMode::Average), &mut rng).unwrap();
        let (logits, ctx) = model.forward(&input(kind, 2, &mut rng), None).unwrap();
        let expect = if kind == BranchKind::MultiRes { 10 } else { 5 };
        assert_eq!(ctx.features().cols(), expect);
        assert_eq!((logits.rows(), logits.cols()), (2, 3));
    }
}

#[test]
fn multires_features_are_global_then_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let multi = Model::<f64>::new(spec(BranchKind::MultiRes, PoolMode::Max), &mut rng).unwrap();
    let x = input(BranchKind::MultiRes, 2, &mut rng);
    let (_, ctx) = multi.forward(&x, None).unwrap();
    let (g, l) = ctx.features().hsplit(5).unwrap();

    let (gmap, _) = multi
        .global_trunk()
        .unwrap()
        .forward(x.global.as_ref().unwrap())
        .unwrap();
    let (gf, _) = crate::pooling::pool_forward(&gmap, PoolMode::Max, None).unwrap();
    assert_eq!(g, gf);
    let crops = x.local.as_ref().unwrap();
    let maps: Vec<_> = crops
        .iter()
        .map(|c| multi.local_trunk().unwrap().forward(c).unwrap().0)
        .collect();
    let refs: Vec<_> = maps.iter().collect();
    let (lf, _) = crate::pooling::cross_crop_pool(&refs, PoolMode::Max, None).unwrap();
    assert_eq!(l, lf);
}

#[test]
fn crop_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in [
        PoolMode::Average,
        PoolMode::Max,
        PoolMode::Outlier { lambda: 1.0 },
    ] {
        let model = Model::<f64>::new(spec(BranchKind::LocalOnly, mode), &mut rng).unwrap();
        let x = input(BranchKind::LocalOnly, 3, &mut rng);
        let mut y = x.clone();
        y.local.as_mut().unwrap().swap(0, 3);
        y.local.as_mut().unwrap().swap(1, 2);
        let (a, _) = model.forward(&x, None).unwrap();
        let (b, _) = model.forward(&y, None).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12, "{mode:?}: {p} vs {q}");
        }
    }
}

#[test]
fn constant_image_logits_by_hand() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = spec(BranchKind::GlobalOnly, PoolMode::Outlier { lambda: 2.0 });
    let mut model = Model::<f64>::new(s, &mut rng).unwrap();
    // Zero kernels make each trunk output the rectified bias of its last layer.
    let biases = [0.5, -1.0, 2.0, 0.0, 3.0];
    {
        let mut params = model.params_mut();
        for p in params.iter_mut() {
            if p.name.ends_with("weight") && p.name.starts_with("global") {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
            if p.name == "global.conv1.bias" {
                p.value.copy_from_slice(&biases);
            }
            if p.name == "head.weight" {
                for (i, v) in p.value.iter_mut().enumerate() {
                    *v = (i % 5) as f64 + 1.0;
                }
            }
            if p.name == "head.bias" {
                p.value.copy_from_slice(&[0.0, 1.0, -1.0]);
            }
        }
    }
    let x = ModelInput {
        global: Some(Tensor4::filled(Shape4::new(1, 3, 8, 8), 7.0).unwrap()),
        local: None,
    };
    let (logits, ctx) = model.forward(&x, None).unwrap();
    // Features are relu(bias) = [0.5, 0, 2, 0, 3]; each head row is [1..5].
    let dot = 0.5 * 1.0 + 2.0 * 3.0 + 3.0 * 5.0;
    assert_eq!(logits.row(0), &[dot, dot + 1.0, dot - 1.0]);
    assert_eq!(ctx.fallback_counts(), (0, 5));
}

#[test]
fn gradients_are_linear_in_the_logit_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Model::<f64>::new(
        spec(BranchKind::MultiRes, PoolMode::Outlier { lambda: 1.0 }),
        &mut rng,
    )
    .unwrap();
    let x = input(BranchKind::MultiRes, 2, &mut rng);
    let (_, ctx) = model.forward(&x, None).unwrap();

    let zero = model.backward(&Matrix::zeros(2, 3), &ctx).unwrap();
    assert!(zero.tensors.iter().flatten().all(|&v| v == 0.0));

    let g = random_grad(2, 3, &mut rng);
    let once = model.backward(&g, &ctx).unwrap();
    let twice = model.backward(&g.scale(2.0), &ctx).unwrap();
    assert_eq!(once.tensors.len(), model.param_names().len());
    for (a, b) in once
        .tensors
        .iter()
        .flatten()
        .zip(twice.tensors.iter().flatten())
    {
        assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn shared_trunk_gradient_is_the_sum_over_crops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let trunk = Trunk::<f64>::new(
        &spec(BranchKind::LocalOnly, PoolMode::Average).trunk,
        &mut rng,
    )
    .unwrap();
    let s = Shape4::new(2, 3, 8, 8);
    let crops: Vec<_> = (0..4).map(|_| randn(s, &mut rng)).collect();
    let grads: Vec<_> = (0..4)
        .map(|_| randn(Shape4::new(2, 5, 4, 4), &mut rng))
        .collect();

    let stacked = Tensor4::concat_batch(&crops.iter().collect::<Vec<_>>()).unwrap();
    let (_, cache) = trunk.forward(&stacked).unwrap();
    let joint = trunk
        .backward(
            &Tensor4::concat_batch(&grads.iter().collect::<Vec<_>>()).unwrap(),
            &cache,
        )
        .unwrap();

    let mut sum: Vec<(Vec<f64>, Vec<f64>)> = joint
        .params
        .iter()
        .map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()]))
        .collect();
    for (c, g) in crops.iter().zip(&grads) {
        let (_, cache) = trunk.forward(c).unwrap();
        for (acc, (w, b)) in sum
            .iter_mut()
            .zip(trunk.backward(g, &cache).unwrap().params)
        {
            acc.0.iter_mut().zip(w).for_each(|(a, v)| *a += v);
            acc.1.iter_mut().zip(b).for_each(|(a, v)| *a += v);
        }
    }
    for ((jw, jb), (sw, sb)) in joint.params.iter().zip(&sum) {
        for (a, b) in jw.iter().chain(jb).zip(sw.iter().chain(sb)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn frozen_forward_matches_and_backward_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mode = PoolMode::DynamicOutlier { lambda: 1.0 };
    let sched = Schedule::new(3, 10).unwrap();
    let mut model = Model::<f64>::new(spec(BranchKind::MultiRes, mode), &mut rng).unwrap();
    let x = input(BranchKind::MultiRes, 2, &mut rng);
    let r = random_grad(2, 3, &mut rng);
    let (logits, ctx) = model.forward(&x, Some(&sched)).unwrap();
    assert_eq!(model.forward_frozen(&x, &ctx).unwrap(), logits);
    let grads = model.backward(&r, &ctx).unwrap();

    let loss = |m: &Model<f64>| -> f64 {
        let y = m.forward_frozen(&x, &ctx).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let eps = 1e-6;
    for (pi, g) in grads.tensors.iter().enumerate() {
        for j in [0, g.len() / 2, g.len() - 1] {
            let orig = model.params()[pi][j];
            model.params_mut()[pi].value[j] = orig + eps;
            let up = loss(&model);
            model.params_mut()[pi].value[j] = orig - eps;
            let down = loss(&model);
            model.params_mut()[pi].value[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let scale = numeric.abs().max(g[j].abs()).max(1e-8);
            assert!(
                (numeric - g[j]).abs() / scale < 1e-6,
                "param {pi}[{j}]: {numeric} vs {}",
                g[j]
            );
        }
    }
}

#[test]
fn stale_context_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model =
        Model::<f64>::new(spec(BranchKind::GlobalOnly, PoolMode::Average), &mut rng).unwrap();
    let other = model.clone();
    let (_, ctx) = model
        .forward(&input(BranchKind::GlobalOnly, 1, &mut rng), None)
        .unwrap();
    assert!(model.backward(&Matrix::zeros(1, 3), &ctx).is_ok());
    let _ = model.params_mut();
    assert!(matches!(
        model.backward(&Matrix::zeros(1, 3), &ctx),
        Err(Error::StaleContext(_))
    ));
    let fresh = other.cast::<f64>();
    assert!(matches!(
        fresh.backward(&Matrix::zeros(1, 3), &ctx),
        Err(Error::StaleContext(_))
    ));
}

#[test]
fn dynamic_needs_a_schedule() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = Model::<f64>::new(
        spec(
            BranchKind::LocalOnly,
            PoolMode::DynamicOutlier { lambda: 2.0 },
        ),
        &mut rng,
    )
    .unwrap();
    let err = model
        .forward(&input(BranchKind::LocalOnly, 1, &mut rng), None)
        .unwrap_err();
    assert!(err.is_config());
}

#[test]
fn wrong_inputs_are_shape_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = Model::<f64>::new(spec(BranchKind::MultiRes, PoolMode::Average), &mut rng).unwrap();
    let mut x = input(BranchKind::MultiRes, 2, &mut rng);
    x.local.as_mut().unwrap().pop();
    assert!(matches!(model.forward(&x, None), Err(Error::Shape(_))));
    let mut x = input(BranchKind::MultiRes, 2, &mut rng);
    x.global = Some(randn(Shape4::new(3, 3, 8, 8), &mut rng));
    assert!(matches!(model.forward(&x, None), Err(Error::Shape(_))));
    let x = input(BranchKind::GlobalOnly, 2, &mut rng);
    assert!(matches!(model.forward(&x, None), Err(Error::Shape(_))));
}

#[test]
fn checkpoint_round_trip_preserves_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = spec(BranchKind::MultiRes, PoolMode::Outlier { lambda: 2.0 });
    let model = Model::<f32>::new(s.clone(), &mut rng).unwrap();
    let mut buf = Vec::new();
    model.to_checkpoint().write(&mut buf).unwrap();
    let ck = crate::nn::checkpoint::Checkpoint::read(&mut buf.as_slice()).unwrap();
    let back = Model::<f32>::from_checkpoint(s.clone(), &ck).unwrap();
    assert_eq!(back.params(), model.params());

    let mut other = s;
    other.branch.kind = BranchKind::GlobalOnly;
    assert!(matches!(
        Model::<f32>::from_checkpoint(other, &ck),
        Err(Error::Format(_))
    ));
}

#[test]
fn training_crops_are_uniform() {
    // 64 wide, 32 crop: 33 equally likely x offsets.
    let b = BranchSpec {
        kind: BranchKind::LocalOnly,
        global_input_size: 32,
        local_crop_size: 32,
        crops_per_image: 4,
        pool_mode: PoolMode::Average,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut counts = [0usize; 33];
    let draws = 2000;
    for _ in 0..draws {
        let plan = make_crop_plan(64, 64, &b, Phase::Train, &mut rng).unwrap();
        for r in plan.local.unwrap().crops {
            counts[r.x] += 1;
        }
    }
    let expected = (draws * 4) as f64 / 33.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 32 degrees of freedom, 0.1% upper tail.
    assert!(chi2 < 62.49, "chi-square {chi2}");
}
