//! Scalar abstraction: everything numeric is generic over `f32`/`f64`.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Additive mask value for blocked attention positions. Finite on purpose:
/// `exp(MASK_NEG - rowmax)` underflows to exactly 0 in both precisions, so a
/// masked position keeps weight 0 without ever producing `inf - inf`.
pub const MASK_NEG: f64 = -1e9;

/// Threshold below which an attention logit counts as masked.
pub const MASK_THRESHOLD: f64 = -1e8;

/// Floating point element type of tensors, implemented for `f32` and `f64`.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn from_f32_exact(v: f32) -> Self;
    fn to_f32_lossy(self) -> f32;

    fn mask_neg() -> Self {
        Self::from_f64_lossy(MASK_NEG)
    }

    fn mask_threshold() -> Self {
        Self::from_f64_lossy(MASK_THRESHOLD)
    }

    /// `c += alpha * a @ b` for row-major matrices (`a` is m1×k, `b` k×m2).
    /// `tr_a`/`tr_b` multiply by the transpose instead, still reading the
    /// row-major buffer of the original orientation.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m1: usize,
        k: usize,
        m2: usize,
        alpha: Self,
        a: &[Self],
        tr_a: bool,
        b: &[Self],
        tr_b: bool,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }
            fn from_f32_exact(v: f32) -> Self {
                v as $t
            }
            fn to_f32_lossy(self) -> f32 {
                self as f32
            }

            fn gemm(
                m1: usize,
                k: usize,
                m2: usize,
                alpha: Self,
                a: &[Self],
                tr_a: bool,
                b: &[Self],
                tr_b: bool,
                c: &mut [Self],
            ) {
                debug_assert_eq!(a.len(), m1 * k);
                debug_assert_eq!(b.len(), k * m2);
                debug_assert_eq!(c.len(), m1 * m2);
                if m1 == 0 || k == 0 || m2 == 0 {
                    return;
                }
                // Row-major strides; a transposed operand swaps them.
                let (rsa, csa) = if tr_a { (1, m1 as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tr_b { (1, k as isize) } else { (m2 as isize, 1) };
                unsafe {
                    $gemm(
                        m1,
                        k,
                        m2,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        1.0,
                        c.as_mut_ptr(),
                        m2 as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
