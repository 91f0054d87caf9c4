//! Floating point scalar abstraction shared by every numeric module.
//!
//! All tensors, parameters and latent statistics are generic over [`Scalar`].
//! Implementations exist for `f32` and `f64`; the crate root exposes `f64`
//! aliases because gradient checks and the acceptance suite run in double
//! precision.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Sum
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag written into checkpoints.
    const DTYPE: &'static str;

    /// Converts an `f64` literal. Never fails for the provided impls.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C = alpha * A B + beta * C` on strided row/column layouts.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are given as
    /// `(row_stride, col_stride)` in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );
}

fn max_offset(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

macro_rules! impl_scalar {
    ($ty:ty, $tag:literal, $kernel:path) => {
        impl Scalar for $ty {
            const DTYPE: &'static str = $tag;

            #[inline]
            fn of(x: f64) -> Self {
                x as $ty
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
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k > 0 {
                    assert!(max_offset(m, k, a_strides) < a.len(), "gemm: lhs out of bounds");
                    assert!(max_offset(k, n, b_strides) < b.len(), "gemm: rhs out of bounds");
                }
                assert!(max_offset(m, n, c_strides) < c.len(), "gemm: output out of bounds");
                // SAFETY: every addressed element was bounds-checked above and
                // `c` is exclusively borrowed, so it cannot alias `a` or `b`.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f64, "f64", matrixmultiply::dgemm);
impl_scalar!(f32, "f32", matrixmultiply::sgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.25).collect();
        let mut c = vec![0.0; 8];
        f64::gemm(2, 3, 4, 1.0, &a, (3, 1), &b, (4, 1), 0.0, &mut c, (4, 1));
        assert_eq!(c, naive(2, 3, 4, &a, &b));
    }

    #[test]
    fn gemm_transposed_strides() {
        // A^T B where A is stored 3x2 row-major.
        let a = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = vec![0.0f32; 4];
        let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        f32::gemm(2, 3, 2, 1.0, &a32, (1, 2), &b32, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, vec![4.0, 5.0, 10.0, 11.0]);
    }
}
