use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type of tensors and layers.
///
/// Gradient checks run in `f64`; training runs in `f32`. Reductions that feed
/// pooling statistics always accumulate in `f64` regardless of the element type.
pub trait Real:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// Tag written into SPT4 headers.
    const DTYPE_TAG: u8;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c <- alpha * op(a) * op(b) + beta * c`, row-major with explicit strides.
    ///
    /// `a` is `m x k` with strides `(rsa, csa)`, `b` is `k x n` with strides
    /// `(rsb, csb)`, `c` is `m x n` row-major contiguous.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_real {
    ($t:ty, $tag:expr, $gemm:path) => {
        impl Real for $t {
            const DTYPE_TAG: u8 = $tag;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                assert!(c.len() >= m * n, "gemm output too small");
                // SAFETY: operand extents were checked above against the given strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, 0, matrixmultiply::sgemm);
impl_real!(f64, 1, matrixmultiply::dgemm);
