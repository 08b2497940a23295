use super::{Matrix, Real, Tensor4};
use crate::error::{Error, Result};

/// Per-image, per-channel spatial statistics and outlier thresholds.
///
/// All three vectors are indexed by `image * channels + channel`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub images: usize,
    pub channels: usize,
    pub lambda: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub threshold: Vec<f64>,
}

impl ChannelStats {
    pub fn mean_at(&self, n: usize, c: usize) -> f64 {
        self.mean[n * self.channels + c]
    }

    pub fn std_at(&self, n: usize, c: usize) -> f64 {
        self.std[n * self.channels + c]
    }

    pub fn threshold_at(&self, n: usize, c: usize) -> f64 {
        self.threshold[n * self.channels + c]
    }
}

/// Mean, population standard deviation and `mean + lambda * std` over the
/// concatenation of `planes`, visited in order.
///
/// Two sequential passes in `f64`. The first pass sums offsets from the first
/// value, so a constant channel yields exactly that constant as its mean and
/// exactly zero deviation.
pub(crate) fn union_stats<T: Real>(planes: &[&[T]], lambda: f64) -> (f64, f64, f64) {
    let count: usize = planes.iter().map(|p| p.len()).sum();
    let origin = planes
        .iter()
        .find_map(|p| p.first())
        .map(|v| v.as_f64())
        .unwrap_or(0.0);
    let mut offset = 0.0f64;
    for plane in planes {
        for v in plane.iter() {
            offset += v.as_f64() - origin;
        }
    }
    let mean = origin + offset / count as f64;
    let mut sq = 0.0f64;
    for plane in planes {
        for v in plane.iter() {
            let d = v.as_f64() - mean;
            sq += d * d;
        }
    }
    let std = (sq / count as f64).sqrt();
    (mean, std, mean + lambda * std)
}

pub fn channel_stats<T: Real>(x: &Tensor4<T>, lambda: f64) -> Result<ChannelStats> {
    if !lambda.is_finite() {
        return Err(Error::Config(format!(
            "lambda must be finite, got {lambda}"
        )));
    }
    x.ensure_finite("channel_stats input")?;
    let s = x.shape();
    let mut mean = Vec::with_capacity(s.planes());
    let mut std = Vec::with_capacity(s.planes());
    let mut threshold = Vec::with_capacity(s.planes());
    for n in 0..s.n {
        for c in 0..s.c {
            let (m, sd, t) = union_stats(&[x.plane(n, c)], lambda);
            mean.push(m);
            std.push(sd);
            threshold.push(t);
        }
    }
    Ok(ChannelStats {
        images: s.n,
        channels: s.c,
        lambda,
        mean,
        std,
        threshold,
    })
}

/// Per-(image, channel) spatial mean, accumulated sequentially in `f64`.
pub fn reduce_spatial_mean<T: Real>(x: &Tensor4<T>) -> Matrix<T> {
    let s = x.shape();
    let hw = s.plane() as f64;
    let data = (0..s.n)
        .flat_map(|n| (0..s.c).map(move |c| (n, c)))
        .map(|(n, c)| {
            let sum: f64 = x.plane(n, c).iter().map(|v| v.as_f64()).sum();
            T::from_f64(sum / hw)
        })
        .collect();
    Matrix {
        rows: s.n,
        cols: s.c,
        data,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMax<T> {
    pub values: Matrix<T>,
    /// Row-major spatial index of the first location attaining the maximum.
    pub argmax: Vec<usize>,
}

pub(crate) fn first_argmax<T: Real>(values: impl Iterator<Item = T>) -> (usize, T) {
    let mut best = (0, T::neg_infinity());
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub fn reduce_spatial_max<T: Real>(x: &Tensor4<T>) -> SpatialMax<T> {
    let s = x.shape();
    let mut data = Vec::with_capacity(s.planes());
    let mut argmax = Vec::with_capacity(s.planes());
    for n in 0..s.n {
        for c in 0..s.c {
            let (i, v) = first_argmax(x.plane(n, c).iter().copied());
            data.push(v);
            argmax.push(i);
        }
    }
    SpatialMax {
        values: Matrix {
            rows: s.n,
            cols: s.c,
            data,
        },
        argmax,
    }
}
