//! Global pooling operators: average, max, outlier and dynamic outlier.
//!
//! Every operator reduces each `(image, channel)` spatial domain to one value.
//! A domain is normally a single plane, but [`cross_crop_pool`] treats the
//! planes of several crops as one domain of `crops * h * w` locations, visited
//! crop by crop in row-major order. That order is exactly the order of the
//! crops stacked along the height axis, so pooling the union and pooling the
//! stacked map agree bit for bit.
//!
//! Outlier selection uses `x >= mean + lambda * std` with per-image,
//! per-channel population statistics. When nothing reaches the threshold the
//! static outlier operator falls back to the channel maximum with a singleton
//! mask; the dynamic operator never needs a fallback because it divides by the
//! full domain size.
//!
//! Backward passes hold the selection (mask, argmax) fixed: no gradient flows
//! through the statistics or the indicator.

mod schedule;

pub use schedule::{schedule_weights, Schedule};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::stats::{first_argmax, union_stats};
use crate::tensor::{Matrix, Real, Shape4, Tensor4};

/// Outlier threshold multiplier used unless configured otherwise.
pub const DEFAULT_LAMBDA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolMode {
    Average,
    Max,
    Outlier { lambda: f64 },
    DynamicOutlier { lambda: f64 },
}

impl PoolMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PoolMode::Outlier { lambda } | PoolMode::DynamicOutlier { lambda } => {
                if !lambda.is_finite() || lambda < 0.0 {
                    return Err(Error::Config(format!(
                        "lambda must be finite and >= 0, got {lambda}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn needs_schedule(&self) -> bool {
        matches!(self, PoolMode::DynamicOutlier { .. })
    }

    pub fn lambda(&self) -> Option<f64> {
        match *self {
            PoolMode::Outlier { lambda } | PoolMode::DynamicOutlier { lambda } => Some(lambda),
            _ => None,
        }
    }

    /// Short name used in tables and file names.
    pub fn label(&self) -> &'static str {
        match self {
            PoolMode::Average => "average",
            PoolMode::Max => "max",
            PoolMode::Outlier { .. } => "outlier",
            PoolMode::DynamicOutlier { .. } => "dynamic_outlier",
        }
    }

    /// Parses the CLI spelling (`avg`, `max`, `outlier`, `dynamic`).
    pub fn parse(name: &str, lambda: f64) -> Result<Self> {
        let mode = match name {
            "avg" | "average" => PoolMode::Average,
            "max" => PoolMode::Max,
            "outlier" => PoolMode::Outlier { lambda },
            "dynamic" | "dynamic_outlier" => PoolMode::DynamicOutlier { lambda },
            other => return Err(Error::Config(format!("unknown pool mode {other:?}"))),
        };
        mode.validate()?;
        Ok(mode)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Selection {
    All,
    /// Domain index of the first maximum, per `(image, channel)`.
    Argmax(Vec<usize>),
    Mask {
        /// `planes * domain` indicator values.
        mask: Vec<bool>,
        count: Vec<usize>,
        fallback: Vec<bool>,
    },
}

/// Forward state needed by the backward pass of one pooling call.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolContext {
    mode: PoolMode,
    weights: Option<(f64, f64)>,
    images: usize,
    channels: usize,
    crops: usize,
    height: usize,
    width: usize,
    selection: Selection,
}

impl PoolContext {
    pub fn mode(&self) -> PoolMode {
        self.mode
    }

    /// `(w1, w2)` used by a dynamic outlier forward pass.
    pub fn weights(&self) -> Option<(f64, f64)> {
        self.weights
    }

    pub fn crops(&self) -> usize {
        self.crops
    }

    /// Shape of one crop's input map.
    pub fn input_shape(&self) -> Shape4 {
        Shape4::new(self.images, self.channels, self.height, self.width)
    }

    fn domain(&self) -> usize {
        self.crops * self.height * self.width
    }

    fn planes(&self) -> usize {
        self.images * self.channels
    }

    /// Number of `(image, channel)` pairs where the outlier set was empty and
    /// the channel maximum was used instead.
    pub fn fallback_count(&self) -> usize {
        match &self.selection {
            Selection::Mask { fallback, .. } => fallback.iter().filter(|&&f| f).count(),
            _ => 0,
        }
    }

    pub fn fallback_flags(&self) -> Vec<bool> {
        match &self.selection {
            Selection::Mask { fallback, .. } => fallback.clone(),
            _ => vec![false; self.planes()],
        }
    }

    pub fn fallback_rate(&self) -> f64 {
        self.fallback_count() as f64 / self.planes() as f64
    }

    /// Locations contributing with the "selected" weight per `(image, channel)`:
    /// every location for average pooling, one for max pooling, `sum(I)` for
    /// the outlier operators.
    pub fn selected_counts(&self) -> Vec<usize> {
        match &self.selection {
            Selection::All => vec![self.domain(); self.planes()],
            Selection::Argmax(a) => vec![1; a.len()],
            Selection::Mask { count, .. } => count.clone(),
        }
    }

    fn selected(&self, plane: usize, i: usize) -> bool {
        match &self.selection {
            Selection::All => true,
            Selection::Argmax(a) => a[plane] == i,
            Selection::Mask { mask, .. } => mask[plane * self.domain() + i],
        }
    }

    /// Indicator maps as 0/1 tensors, one per crop.
    pub fn mask_tensors(&self) -> Vec<Tensor4<f32>> {
        let hw = self.height * self.width;
        (0..self.crops)
            .map(|k| {
                let mut data = Vec::with_capacity(self.planes() * hw);
                for p in 0..self.planes() {
                    for i in 0..hw {
                        data.push(if self.selected(p, k * hw + i) {
                            1.0
                        } else {
                            0.0
                        });
                    }
                }
                Tensor4::from_parts(self.input_shape(), data)
            })
            .collect()
    }

    fn check_crops<T: Real>(&self, crops: &[&Tensor4<T>]) -> Result<()> {
        if crops.len() != self.crops {
            return Err(Error::Shape(format!(
                "context expects {} crops, got {}",
                self.crops,
                crops.len()
            )));
        }
        for c in crops {
            if c.shape() != self.input_shape() {
                return Err(Error::Shape(format!(
                    "context expects {} maps, got {}",
                    self.input_shape(),
                    c.shape()
                )));
            }
        }
        Ok(())
    }

    /// Re-evaluates the forward value with this context's selection and
    /// weights frozen. At the inputs that produced the context this equals
    /// the original forward output; near them it is the smooth branch the
    /// backward pass differentiates.
    pub fn replay<T: Real>(&self, crops: &[&Tensor4<T>]) -> Result<Matrix<T>> {
        self.check_crops(crops)?;
        let domain = self.domain();
        let mut out = Matrix::zeros(self.images, self.channels);
        for n in 0..self.images {
            for c in 0..self.channels {
                let p = n * self.channels + c;
                let values: Vec<f64> = crops
                    .iter()
                    .flat_map(|t| t.plane(n, c).iter().map(|v| v.as_f64()))
                    .collect();
                let values = values.into_iter();
                let v = match &self.selection {
                    Selection::All => values.sum::<f64>() / domain as f64,
                    Selection::Argmax(a) => values.clone().nth(a[p]).unwrap_or(0.0),
                    Selection::Mask { mask, count, .. } => {
                        let m = &mask[p * domain..(p + 1) * domain];
                        match self.weights {
                            Some((w1, w2)) => {
                                let (hi, lo) = split_sums(values, m);
                                (w1 * hi + w2 * lo) / domain as f64
                            }
                            None => split_sums(values, m).0 / count[p] as f64,
                        }
                    }
                };
                out.set(n, c, T::from_f64(v));
            }
        }
        Ok(out)
    }
}

fn split_sums(values: impl Iterator<Item = f64>, mask: &[bool]) -> (f64, f64) {
    let mut hi = 0.0;
    let mut lo = 0.0;
    for (v, &m) in values.zip(mask) {
        if m {
            hi += v;
        } else {
            lo += v;
        }
    }
    (hi, lo)
}

/// Pools one spatial map per `(image, channel)` to an `N x C` feature matrix.
pub fn pool_forward<T: Real>(
    x: &Tensor4<T>,
    mode: PoolMode,
    schedule: Option<&Schedule>,
) -> Result<(Matrix<T>, PoolContext)> {
    pool_union(&[x], mode, schedule)
}

/// Pools the union of several crops' maps as one spatial domain.
pub fn cross_crop_pool<T: Real>(
    crops: &[&Tensor4<T>],
    mode: PoolMode,
    schedule: Option<&Schedule>,
) -> Result<(Matrix<T>, PoolContext)> {
    pool_union(crops, mode, schedule)
}

fn pool_union<T: Real>(
    crops: &[&Tensor4<T>],
    mode: PoolMode,
    schedule: Option<&Schedule>,
) -> Result<(Matrix<T>, PoolContext)> {
    mode.validate()?;
    let first = crops
        .first()
        .ok_or_else(|| Error::Shape("pooling needs at least one map".into()))?
        .shape();
    for c in crops {
        if c.shape() != first {
            return Err(Error::Shape(format!(
                "crop maps must share a shape: {} vs {first}",
                c.shape()
            )));
        }
        c.ensure_finite("pooling input")?;
    }
    let weights = match (mode, schedule) {
        (PoolMode::DynamicOutlier { .. }, Some(s)) => Some(s.weights()),
        (PoolMode::DynamicOutlier { .. }, None) => {
            return Err(Error::Config(
                "dynamic outlier pooling requires a training schedule".into(),
            ))
        }
        _ => None,
    };

    let planes = first.planes();
    let domain = crops.len() * first.plane();
    let mut out = Matrix::zeros(first.n, first.c);
    let mut argmax = Vec::new();
    let mut mask = Vec::new();
    let mut count = Vec::new();
    let mut fallback = Vec::new();
    match mode {
        PoolMode::Max => argmax.reserve(planes),
        PoolMode::Outlier { .. } | PoolMode::DynamicOutlier { .. } => {
            mask.reserve(planes * domain);
            count.reserve(planes);
            fallback.reserve(planes);
        }
        PoolMode::Average => {}
    }

    let mut parts: Vec<&[T]> = Vec::with_capacity(crops.len());
    for n in 0..first.n {
        for c in 0..first.c {
            parts.clear();
            parts.extend(crops.iter().map(|t| t.plane(n, c)));
            let values = || parts.iter().flat_map(|p| p.iter().copied());
            let value = match mode {
                PoolMode::Average => values().map(|v| v.as_f64()).sum::<f64>() / domain as f64,
                PoolMode::Max => {
                    let (i, v) = first_argmax(values());
                    argmax.push(i);
                    v.as_f64()
                }
                PoolMode::Outlier { lambda } => {
                    let (_, _, t) = union_stats(&parts, lambda);
                    let start = mask.len();
                    let mut selected = 0usize;
                    let mut sum = 0.0f64;
                    for v in values() {
                        let v = v.as_f64();
                        let hit = v >= t;
                        if hit {
                            selected += 1;
                            sum += v;
                        }
                        mask.push(hit);
                    }
                    if selected == 0 {
                        let (i, v) = first_argmax(values());
                        mask[start + i] = true;
                        count.push(1);
                        fallback.push(true);
                        v.as_f64()
                    } else {
                        count.push(selected);
                        fallback.push(false);
                        sum / selected as f64
                    }
                }
                PoolMode::DynamicOutlier { lambda } => {
                    let (w1, w2) = weights.expect("checked above");
                    let (_, _, t) = union_stats(&parts, lambda);
                    let mut selected = 0usize;
                    let mut hi = 0.0f64;
                    let mut lo = 0.0f64;
                    for v in values() {
                        let v = v.as_f64();
                        let hit = v >= t;
                        if hit {
                            selected += 1;
                            hi += v;
                        } else {
                            lo += v;
                        }
                        mask.push(hit);
                    }
                    count.push(selected);
                    fallback.push(false);
                    (w1 * hi + w2 * lo) / domain as f64
                }
            };
            out.set(n, c, T::from_f64(value));
        }
    }

    let selection = match mode {
        PoolMode::Average => Selection::All,
        PoolMode::Max => Selection::Argmax(argmax),
        _ => Selection::Mask {
            mask,
            count,
            fallback,
        },
    };
    Ok((
        out,
        PoolContext {
            mode,
            weights,
            images: first.n,
            channels: first.c,
            crops: crops.len(),
            height: first.h,
            width: first.w,
            selection,
        },
    ))
}

/// Gradient of a single-map pooling call with respect to its input.
pub fn pool_backward<T: Real>(
    grad_out: &Matrix<T>,
    ctx: &PoolContext,
    input_shape: Shape4,
) -> Result<Tensor4<T>> {
    if ctx.crops != 1 {
        return Err(Error::Shape(format!(
            "context covers {} crops; use cross_crop_backward",
            ctx.crops
        )));
    }
    if input_shape != ctx.input_shape() {
        return Err(Error::Shape(format!(
            "input shape {input_shape} does not match pooled shape {}",
            ctx.input_shape()
        )));
    }
    Ok(cross_crop_backward(grad_out, ctx)?.pop().expect("one crop"))
}

/// Routes pooled gradients back to the crop each location came from.
pub fn cross_crop_backward<T: Real>(
    grad_out: &Matrix<T>,
    ctx: &PoolContext,
) -> Result<Vec<Tensor4<T>>> {
    if grad_out.rows() != ctx.images || grad_out.cols() != ctx.channels {
        return Err(Error::Shape(format!(
            "gradient is {}x{}, pooled features were {}x{}",
            grad_out.rows(),
            grad_out.cols(),
            ctx.images,
            ctx.channels
        )));
    }
    if !grad_out.is_finite() {
        return Err(Error::NonFinite {
            context: "pooling output gradient".into(),
        });
    }
    let hw = ctx.height * ctx.width;
    let domain = ctx.domain();
    let mut grads: Vec<Tensor4<T>> = (0..ctx.crops)
        .map(|_| Tensor4::from_parts(ctx.input_shape(), vec![T::zero(); ctx.planes() * hw]))
        .collect();
    for n in 0..ctx.images {
        for c in 0..ctx.channels {
            let p = n * ctx.channels + c;
            let g = grad_out.get(n, c).as_f64();
            match &ctx.selection {
                Selection::All => {
                    let v = T::from_f64(g / domain as f64);
                    for t in grads.iter_mut() {
                        t.plane_mut(n, c).iter_mut().for_each(|x| *x = v);
                    }
                }
                Selection::Argmax(a) => {
                    let i = a[p];
                    grads[i / hw].plane_mut(n, c)[i % hw] = T::from_f64(g);
                }
                Selection::Mask { mask, count, .. } => {
                    let m = &mask[p * domain..(p + 1) * domain];
                    let (on, off) = match ctx.weights {
                        Some((w1, w2)) => (w1 * g / domain as f64, w2 * g / domain as f64),
                        None => (g / count[p] as f64, 0.0),
                    };
                    let (on, off) = (T::from_f64(on), T::from_f64(off));
                    for (k, t) in grads.iter_mut().enumerate() {
                        let plane = t.plane_mut(n, c);
                        for (i, x) in plane.iter_mut().enumerate() {
                            *x = if m[k * hw + i] { on } else { off };
                        }
                    }
                }
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests;
