use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OUTLIER: PoolMode = PoolMode::Outlier { lambda: 2.0 };
const DYNAMIC: PoolMode = PoolMode::DynamicOutlier { lambda: 2.0 };

fn tensor(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor4<f64> {
    Tensor4::new(Shape4::new(shape.0, shape.1, shape.2, shape.3), data).unwrap()
}

fn spike() -> Tensor4<f64> {
    tensor((1, 1, 2, 4), vec![0., 0., 0., 0., 0., 0., 0., 8.])
}

fn random(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::new(
        shape,
        (0..shape.len())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
    )
    .unwrap()
}

fn pool(x: &Tensor4<f64>, mode: PoolMode, s: Option<&Schedule>) -> Matrix<f64> {
    pool_forward(x, mode, s).unwrap().0
}

#[test]
fn outlier_selects_single_spike() {
    let (y, ctx) = pool_forward(&spike(), OUTLIER, None).unwrap();
    assert_eq!(y.get(0, 0), 8.0);
    assert_eq!(ctx.selected_counts(), vec![1]);
    assert_eq!(ctx.fallback_count(), 0);
}

#[test]
fn outlier_on_constant_channel_is_average() {
    for lambda in [0.0, 2.0, 17.5] {
        let x = tensor((1, 1, 3, 3), vec![0.3; 9]);
        let y = pool(&x, PoolMode::Outlier { lambda }, None);
        assert_eq!(y.get(0, 0), 0.3);
        assert_eq!(y, pool(&x, PoolMode::Average, None));
    }
}

#[test]
fn outlier_gives_both_flowers_full_credit() {
    let mut v = vec![0.0; 16];
    v[3] = 8.0;
    v[12] = 8.0;
    let x = tensor((1, 1, 4, 4), v);
    let (y, ctx) = pool_forward(&x, OUTLIER, None).unwrap();
    assert_eq!(y.get(0, 0), 8.0);
    assert_eq!(ctx.selected_counts(), vec![2]);
    assert_eq!(pool(&x, PoolMode::Average, None).get(0, 0), 1.0);
    let (m, mctx) = pool_forward(&x, PoolMode::Max, None).unwrap();
    assert_eq!(m.get(0, 0), 8.0);
    assert_eq!(mctx.selected_counts(), vec![1]);
}

#[test]
fn empty_outlier_set_falls_back_to_max() {
    // one spike among four locations has z-score sqrt(3) < 2
    let x = tensor((1, 1, 2, 2), vec![0., 0., 4., 0.]);
    let (y, ctx) = pool_forward(&x, OUTLIER, None).unwrap();
    assert_eq!(y.get(0, 0), 4.0);
    assert_eq!(ctx.fallback_count(), 1);
    assert_eq!(ctx.selected_counts(), vec![1]);
    let g = pool_backward(&Matrix::new(1, 1, vec![1.0]).unwrap(), &ctx, x.shape()).unwrap();
    assert_eq!(g.data(), &[0., 0., 1., 0.]);
    assert_eq!(ctx.mask_tensors()[0].data(), &[0., 0., 1., 0.]);
}

#[test]
fn dynamic_at_start_is_average() {
    let s = Schedule::new(0, 20).unwrap();
    let x = spike();
    assert_eq!(
        pool(&x, DYNAMIC, Some(&s)),
        pool(&x, PoolMode::Average, None)
    );
}

#[test]
fn dynamic_at_end_does_not_match_static_outlier() {
    let s = Schedule::finished(20).unwrap();
    assert_eq!(pool(&spike(), DYNAMIC, Some(&s)).get(0, 0), 2.0);
    assert_eq!(pool(&spike(), OUTLIER, None).get(0, 0), 8.0);
}

#[test]
fn dynamic_without_schedule_is_config_error() {
    assert!(matches!(
        pool_forward(&spike(), DYNAMIC, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn rejects_bad_lambda() {
    let bad = PoolMode::Outlier { lambda: -1.0 };
    assert!(matches!(
        pool_forward(&spike(), bad, None),
        Err(Error::Config(_))
    ));
    assert!(PoolMode::parse("median", 2.0).is_err());
}

#[test]
fn backward_examples() {
    let one = Matrix::new(1, 1, vec![1.0]).unwrap();
    let x = tensor((1, 1, 2, 2), vec![1., 5., 5., 2.]);
    let (_, ctx) = pool_forward(&x, PoolMode::Average, None).unwrap();
    let g = pool_backward(&Matrix::new(1, 1, vec![4.0]).unwrap(), &ctx, x.shape()).unwrap();
    assert_eq!(g.data(), &[1., 1., 1., 1.]);

    let (_, ctx) = pool_forward(&x, PoolMode::Max, None).unwrap();
    let g = pool_backward(&one, &ctx, x.shape()).unwrap();
    assert_eq!(g.data(), &[0., 1., 0., 0.]);

    let (_, ctx) = pool_forward(&spike(), OUTLIER, None).unwrap();
    let g = pool_backward(&one, &ctx, spike().shape()).unwrap();
    assert_eq!(g.data(), &[0., 0., 0., 0., 0., 0., 0., 1.]);

    let s = Schedule::new(10, 20).unwrap();
    let (_, ctx) = pool_forward(&spike(), DYNAMIC, Some(&s)).unwrap();
    let g = pool_backward(&one, &ctx, spike().shape()).unwrap();
    let mut want = vec![0.5 / 8.0; 8];
    want[7] = 1.5 / 8.0;
    assert_eq!(g.data(), want.as_slice());
}

#[test]
fn backward_rejects_mismatched_gradient() {
    let (_, ctx) = pool_forward(&spike(), PoolMode::Average, None).unwrap();
    let g = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
    assert!(matches!(
        pool_backward(&g, &ctx, spike().shape()),
        Err(Error::Shape(_))
    ));
    let g = Matrix::new(1, 1, vec![1.0]).unwrap();
    assert!(pool_backward(&g, &ctx, Shape4::new(1, 1, 4, 2)).is_err());
}

#[test]
fn non_finite_input_is_rejected() {
    let mut x = spike();
    x.data_mut()[2] = f64::NAN;
    assert!(matches!(
        pool_forward(&x, PoolMode::Average, None),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn cross_crop_union_spike() {
    let zero = tensor((1, 1, 2, 2), vec![0.0; 4]);
    let hit = tensor((1, 1, 2, 2), vec![0., 8., 0., 0.]);
    let crops = [&zero, &hit, &zero, &zero];
    // union of 16 values: mean 0.5, variance 64/16 - 0.25 = 3.75, threshold 0.5 + 2 sqrt(3.75) ~ 4.37
    let (y, ctx) = cross_crop_pool(&crops, OUTLIER, None).unwrap();
    assert_eq!(y.get(0, 0), 8.0);
    assert_eq!(ctx.fallback_count(), 0);
    // pooling each crop separately then averaging dilutes the spike
    let per_crop: f64 = crops
        .iter()
        .map(|c| pool(c, OUTLIER, None).get(0, 0))
        .sum::<f64>()
        / 4.0;
    assert!(per_crop < 2.5);

    let g = cross_crop_backward(&Matrix::new(1, 1, vec![1.0]).unwrap(), &ctx).unwrap();
    assert_eq!(g[1].data(), &[0., 1., 0., 0.]);
    assert!(g[0]
        .data()
        .iter()
        .chain(g[2].data())
        .chain(g[3].data())
        .all(|&v| v == 0.0));
}

#[test]
fn cross_crop_average_is_mean_of_crop_averages() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = Shape4::new(2, 3, 4, 4);
    let crops: Vec<_> = (0..4).map(|_| random(shape, &mut rng)).collect();
    let refs: Vec<_> = crops.iter().collect();
    let y = cross_crop_pool(&refs, PoolMode::Average, None).unwrap().0;
    for n in 0..2 {
        for c in 0..3 {
            let mean: f64 = crops
                .iter()
                .map(|t| pool(t, PoolMode::Average, None).get(n, c))
                .sum::<f64>()
                / 4.0;
            assert!((y.get(n, c) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn replay_reproduces_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(Shape4::new(2, 4, 5, 3), &mut rng);
    let s = Schedule::new(7, 20).unwrap();
    for mode in [PoolMode::Average, PoolMode::Max, OUTLIER, DYNAMIC] {
        let (y, ctx) = pool_forward(&x, mode, Some(&s)).unwrap();
        let r = ctx.replay(&[&x]).unwrap();
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-14, "{mode:?}");
        }
    }
}

#[test]
fn mask_tensor_matches_selection() {
    let (_, ctx) = pool_forward(&spike(), OUTLIER, None).unwrap();
    let m = ctx.mask_tensors();
    assert_eq!(m.len(), 1);
    assert_eq!(m[0].data(), &[0., 0., 0., 0., 0., 0., 0., 1.]);
}

fn arb_tensor() -> impl Strategy<Value = Tensor4<f64>> {
    (1usize..3, 1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(n, c, h, w)| {
        proptest::collection::vec(-5.0f64..5.0, n * c * h * w)
            .prop_map(move |d| Tensor4::new(Shape4::new(n, c, h, w), d).unwrap())
    })
}

proptest! {
    #[test]
    fn ordering_without_fallback(x in arb_tensor(), lambda in 0.0f64..3.0) {
        let avg = pool(&x, PoolMode::Average, None);
        let max = pool(&x, PoolMode::Max, None);
        let (out, ctx) = pool_forward(&x, PoolMode::Outlier { lambda }, None).unwrap();
        let flags = ctx.fallback_flags();
        let s = x.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                if flags[n * s.c + c] {
                    continue;
                }
                let lo = x.plane(n, c).iter().cloned().fold(f64::INFINITY, f64::min);
                prop_assert!(lo <= avg.get(n, c) + 1e-12);
                prop_assert!(avg.get(n, c) <= out.get(n, c) + 1e-12);
                prop_assert!(out.get(n, c) <= max.get(n, c) + 1e-12);
            }
        }
    }

    #[test]
    fn mask_never_empty(x in arb_tensor(), lambda in 0.0f64..6.0) {
        let (_, ctx) = pool_forward(&x, PoolMode::Outlier { lambda }, None).unwrap();
        prop_assert!(ctx.selected_counts().iter().all(|&k| k >= 1));
    }

    #[test]
    fn backward_is_linear(x in arb_tensor(), a in -4.0f64..4.0, epoch in 0usize..=20) {
        let s = Schedule::new(epoch, 20).unwrap();
        let shape = x.shape();
        let g: Vec<f64> = (0..shape.planes()).map(|i| (i as f64 * 0.37).sin()).collect();
        let g = Matrix::new(shape.n, shape.c, g).unwrap();
        for mode in [PoolMode::Average, PoolMode::Max, OUTLIER, DYNAMIC] {
            let (_, ctx) = pool_forward(&x, mode, Some(&s)).unwrap();
            let base = pool_backward(&g, &ctx, shape).unwrap();
            let scaled = pool_backward(&g.scale(a), &ctx, shape).unwrap();
            for (u, v) in base.data().iter().zip(scaled.data()) {
                prop_assert!((u * a - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn lambda_zero_outlier_is_mean_of_upper_part(x in arb_tensor()) {
        let y = pool(&x, PoolMode::Outlier { lambda: 0.0 }, None);
        let s = x.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                let plane = x.plane(n, c);
                if plane.iter().all(|&v| v == plane[0]) {
                    continue;
                }
                let mean = plane.iter().sum::<f64>() / plane.len() as f64;
                let upper: Vec<f64> = plane.iter().cloned().filter(|&v| v >= mean).collect();
                let want = upper.iter().sum::<f64>() / upper.len() as f64;
                prop_assert!((y.get(n, c) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn stacked_crops_match_union(x in arb_tensor(), epoch in 0usize..=10) {
        let s = Schedule::new(epoch, 10).unwrap();
        let shape = x.shape();
        let crops: Vec<Tensor4<f64>> = (0..4)
            .map(|k| x.map(|v| v * (1.0 + k as f64 * 0.25) - k as f64).unwrap())
            .collect();
        let stacked = Tensor4::from_fn(Shape4::new(shape.n, shape.c, 4 * shape.h, shape.w), |n, c, y, xx| {
            crops[y / shape.h].get(n, c, y % shape.h, xx)
        }).unwrap();
        let refs: Vec<_> = crops.iter().collect();
        for mode in [PoolMode::Average, PoolMode::Max, OUTLIER, DYNAMIC] {
            let a = cross_crop_pool(&refs, mode, Some(&s)).unwrap().0;
            let b = pool(&stacked, mode, Some(&s));
            prop_assert_eq!(a, b);
        }
    }
}
