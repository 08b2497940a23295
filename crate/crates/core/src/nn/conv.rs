use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

/// 2-D convolution over NCHW tensors, lowered to one matrix product per batch
/// through an im2col buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `(out_channels, in_channels, k, k)`.
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

/// Forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    input_shape: Shape4,
    out_h: usize,
    out_w: usize,
    /// `K x (N * P)` with `K = in * k * k` and `P = out_h * out_w`.
    cols: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("convolution stride must be >= 1".into()));
    }
    let span = input + 2 * padding;
    if span < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} does not fit input {input} with padding {padding}"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

impl<T: Real> Conv2d<T> {
    /// He-scaled Gaussian weights, zero bias.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        let shape = Shape4::new(out_channels, in_channels, kernel, kernel);
        shape.validate()?;
        let scale = (2.0 / (in_channels * kernel * kernel) as f64).sqrt();
        let data = (0..shape.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * scale)
            })
            .collect();
        Ok(Conv2d {
            weight: Tensor4::new(shape, data)?,
            bias: vec![T::zero(); out_channels],
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.c != self.in_channels() {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels(),
                input.c
            )));
        }
        let k = self.kernel();
        Ok(Shape4::new(
            input.n,
            self.out_channels(),
            conv_output_size(input.h, k, self.stride, self.padding)?,
            conv_output_size(input.w, k, self.stride, self.padding)?,
        ))
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, ConvCache<T>)> {
        let out = self.output_shape(x.shape())?;
        let cols = self.im2col(x, out.h, out.w);
        let kdim = self.in_channels() * self.kernel() * self.kernel();
        let p = out.h * out.w;
        let np = out.n * p;
        let cout = self.out_channels();
        // Y' = W (cout x K) * cols (K x NP)
        let mut flat = vec![T::zero(); cout * np];
        T::gemm(
            cout,
            kdim,
            np,
            T::one(),
            self.weight.data(),
            kdim as isize,
            1,
            &cols,
            np as isize,
            1,
            T::zero(),
            &mut flat,
        );
        let mut y = vec![T::zero(); out.len()];
        for n in 0..out.n {
            for co in 0..cout {
                let b = self.bias[co];
                let src = &flat[co * np + n * p..co * np + (n + 1) * p];
                let dst = &mut y[(n * cout + co) * p..(n * cout + co + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        Ok((
            Tensor4::from_parts(out, y),
            ConvCache {
                input_shape: x.shape(),
                out_h: out.h,
                out_w: out.w,
                cols,
            },
        ))
    }

    fn im2col(&self, x: &Tensor4<T>, out_h: usize, out_w: usize) -> Vec<T> {
        let s = x.shape();
        let k = self.kernel();
        let p = out_h * out_w;
        let np = s.n * p;
        let pad = self.padding as isize;
        let mut cols = vec![T::zero(); s.c * k * k * np];
        for ci in 0..s.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut cols[row * np..(row + 1) * np];
                    for n in 0..s.n {
                        let plane = x.plane(n, ci);
                        let dst = &mut dst_row[n * p..(n + 1) * p];
                        for oy in 0..out_h {
                            let iy = (oy * self.stride + ky) as isize - pad;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            let src_row = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                            let dst_line = &mut dst[oy * out_w..(oy + 1) * out_w];
                            for (ox, d) in dst_line.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if ix >= 0 && ix < s.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Gradients for weights, bias and (optionally) the input.
    pub fn backward(
        &self,
        grad_y: &Tensor4<T>,
        cache: &ConvCache<T>,
        need_input: bool,
    ) -> Result<ConvGrads<T>> {
        let input = cache.input_shape;
        let cout = self.out_channels();
        let expected = Shape4::new(input.n, cout, cache.out_h, cache.out_w);
        if grad_y.shape() != expected {
            return Err(Error::Shape(format!(
                "convolution output gradient is {}, expected {expected}",
                grad_y.shape()
            )));
        }
        let k = self.kernel();
        let kdim = input.c * k * k;
        let p = cache.out_h * cache.out_w;
        let np = input.n * p;

        // gather grad_y into cout x NP
        let mut gflat = vec![T::zero(); cout * np];
        let mut grad_b = vec![T::zero(); cout];
        for n in 0..input.n {
            for co in 0..cout {
                let src = grad_y.plane(n, co);
                gflat[co * np + n * p..co * np + (n + 1) * p].copy_from_slice(src);
                let s: f64 = src.iter().map(|v| v.as_f64()).sum();
                grad_b[co] += T::from_f64(s);
            }
        }

        // dW = G (cout x NP) * cols^T (NP x K)
        let mut grad_w = vec![T::zero(); cout * kdim];
        T::gemm(
            cout,
            np,
            kdim,
            T::one(),
            &gflat,
            np as isize,
            1,
            &cache.cols,
            1,
            np as isize,
            T::zero(),
            &mut grad_w,
        );

        let grad_x = if need_input {
            // dcols = W^T (K x cout) * G (cout x NP)
            let mut dcols = vec![T::zero(); kdim * np];
            T::gemm(
                kdim,
                cout,
                np,
                T::one(),
                self.weight.data(),
                1,
                kdim as isize,
                &gflat,
                np as isize,
                1,
                T::zero(),
                &mut dcols,
            );
            Some(self.col2im(&dcols, input, cache.out_h, cache.out_w))
        } else {
            None
        };

        Ok(ConvGrads {
            input: grad_x,
            weight: grad_w,
            bias: grad_b,
        })
    }

    fn col2im(&self, dcols: &[T], input: Shape4, out_h: usize, out_w: usize) -> Tensor4<T> {
        let k = self.kernel();
        let p = out_h * out_w;
        let np = input.n * p;
        let pad = self.padding as isize;
        let mut gx = Tensor4::from_parts(input, vec![T::zero(); input.len()]);
        for ci in 0..input.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &dcols[row * np..(row + 1) * np];
                    for n in 0..input.n {
                        let src = &src_row[n * p..(n + 1) * p];
                        let plane = gx.plane_mut(n, ci);
                        for oy in 0..out_h {
                            let iy = (oy * self.stride + ky) as isize - pad;
                            if iy < 0 || iy >= input.h as isize {
                                continue;
                            }
                            let line =
                                &mut plane[iy as usize * input.w..(iy as usize + 1) * input.w];
                            for ox in 0..out_w {
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if ix >= 0 && ix < input.w as isize {
                                    line[ix as usize] += src[oy * out_w + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}
