//! Rank-4 activation container and the spatial reductions built on it.
//!
//! Layout is always `(batch, channel, height, width)`, row-major. A
//! `(image, channel)` pair addresses one contiguous spatial plane.

mod scalar;
pub mod spt4;
pub(crate) mod stats;

pub use scalar::Real;
pub use stats::{channel_stats, reduce_spatial_max, reduce_spatial_mean, ChannelStats, SpatialMax};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn planes(&self) -> usize {
        self.n * self.c
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Shape(format!(
                "every dimension must be >= 1, got {self}"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T = f64> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    /// Builds a tensor, rejecting zero dimensions, length mismatches and
    /// non-finite values.
    pub fn new(shape: Shape4, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape} ({} values)",
                data.len(),
                shape.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "tensor construction".into(),
            });
        }
        Ok(Tensor4 { shape, data })
    }

    /// Trusted constructor for layer internals; shape and length must agree.
    pub(crate) fn from_parts(shape: Shape4, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Tensor4 { shape, data }
    }

    pub fn zeros(shape: Shape4) -> Result<Self> {
        shape.validate()?;
        Ok(Tensor4 {
            shape,
            data: vec![T::zero(); shape.len()],
        })
    }

    pub fn filled(shape: Shape4, value: T) -> Result<Self> {
        Tensor4::new(shape, vec![value; shape.len()])
    }

    pub fn from_fn(
        shape: Shape4,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Result<Self> {
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4::new(shape, data)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// The spatial plane of `(image, channel)`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub(crate) fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All values of image `n` (every channel).
    pub fn image(&self, n: usize) -> &[T] {
        let stride = self.shape.c * self.shape.plane();
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Tensor4::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Stacks tensors along the batch axis.
    pub fn concat_batch(parts: &[&Tensor4<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?
            .shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let s = p.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::Shape(format!("cannot batch {s} with {first}")));
            }
            n += s.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4::from_parts(
            Shape4::new(n, first.c, first.h, first.w),
            data,
        ))
    }

    /// Splits along the batch axis into consecutive chunks of `chunk` images.
    pub fn split_batch(&self, chunk: usize) -> Result<Vec<Tensor4<T>>> {
        if chunk == 0 || !self.shape.n.is_multiple_of(chunk) {
            return Err(Error::Shape(format!(
                "batch {} is not divisible into chunks of {chunk}",
                self.shape.n
            )));
        }
        let per = chunk * self.shape.c * self.shape.plane();
        Ok(self
            .data
            .chunks(per)
            .map(|d| {
                Tensor4::from_parts(
                    Shape4::new(chunk, self.shape.c, self.shape.h, self.shape.w),
                    d.to_vec(),
                )
            })
            .collect())
    }
}

/// Dense row-major matrix; pooled features (`N x C`), logits and head weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scale(&self, a: T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * a).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates along columns: `[self | other]`.
    pub fn hconcat(&self, other: &Matrix<T>) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "cannot concatenate {} rows with {} rows",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Splits columns at `at` into `([.., ..at], [.., at..])`.
    pub fn hsplit(&self, at: usize) -> Result<(Self, Self)> {
        if at > self.cols {
            return Err(Error::Shape(format!("split column {at} > {}", self.cols)));
        }
        let mut left = Vec::with_capacity(self.rows * at);
        let mut right = Vec::with_capacity(self.rows * (self.cols - at));
        for r in 0..self.rows {
            let row = self.row(r);
            left.extend_from_slice(&row[..at]);
            right.extend_from_slice(&row[at..]);
        }
        Ok((
            Matrix {
                rows: self.rows,
                cols: at,
                data: left,
            },
            Matrix {
                rows: self.rows,
                cols: self.cols - at,
                data: right,
            },
        ))
    }
}
