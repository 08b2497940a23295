use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// Elementwise `max(0, x)`.
pub fn relu_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor4::from_parts(x.shape(), data)
}

/// Passes gradient where the forward input was strictly positive; the kink at
/// zero gets gradient 0.
pub fn relu_backward<T: Real>(grad_y: &Tensor4<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    if grad_y.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "rectifier gradient {} vs input {}",
            grad_y.shape(),
            x.shape()
        )));
    }
    let data = grad_y
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor4::from_parts(x.shape(), data))
}
