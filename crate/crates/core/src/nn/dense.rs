use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

/// Fully connected layer, `y = x W^T + b` over row-major batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `out_dim x in_dim`.
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Matrix<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Shape("dense dimensions must be >= 1".into()));
        }
        let scale = (2.0 / in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * scale)
            })
            .collect();
        Ok(Dense {
            weight: Matrix::new(out_dim, in_dim, w)?,
            bias: vec![T::zero(); out_dim],
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let (n, i, o) = (x.rows(), self.in_dim(), self.out_dim());
        let mut y = Matrix::zeros(n, o);
        for r in 0..n {
            y.row_mut(r).copy_from_slice(&self.bias);
        }
        T::gemm(
            n,
            i,
            o,
            T::one(),
            x.data(),
            i as isize,
            1,
            self.weight.data(),
            1,
            i as isize,
            T::one(),
            y.data_mut(),
        );
        Ok(y)
    }

    pub fn backward(&self, x: &Matrix<T>, grad_y: &Matrix<T>) -> Result<DenseGrads<T>> {
        let (n, i, o) = (x.rows(), self.in_dim(), self.out_dim());
        if grad_y.rows() != n || grad_y.cols() != o || x.cols() != i {
            return Err(Error::Shape(format!(
                "dense backward: input {}x{}, gradient {}x{}, layer {o}x{i}",
                x.rows(),
                x.cols(),
                grad_y.rows(),
                grad_y.cols()
            )));
        }
        let mut gx = Matrix::zeros(n, i);
        // dX = G (n x o) * W (o x i)
        T::gemm(
            n,
            o,
            i,
            T::one(),
            grad_y.data(),
            o as isize,
            1,
            self.weight.data(),
            i as isize,
            1,
            T::zero(),
            gx.data_mut(),
        );
        // dW = G^T (o x n) * X (n x i)
        let mut gw = vec![T::zero(); o * i];
        T::gemm(
            o,
            n,
            i,
            T::one(),
            grad_y.data(),
            1,
            o as isize,
            x.data(),
            i as isize,
            1,
            T::zero(),
            &mut gw,
        );
        let mut gb = vec![T::zero(); o];
        for r in 0..n {
            for (b, &g) in gb.iter_mut().zip(grad_y.row(r)) {
                *b += g;
            }
        }
        Ok(DenseGrads {
            input: gx,
            weight: gw,
            bias: gb,
        })
    }
}
