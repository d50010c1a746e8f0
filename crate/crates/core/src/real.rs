//! Scalar abstraction so the same code runs in f32 (training) and f64
//! (gradient verification).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Name written into checkpoint directories.
    const DTYPE: &'static str;

    fn erf(self) -> Self;

    /// Lossy conversion from an f64 literal.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c += a * b` on strided views, `a` is `m x k`, `b` is `k x n`.
    /// Strides are in elements; callers guarantee every addressed element
    /// lies inside its slice.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], c: &mut [Self], sc: [isize; 2]);
}

fn last_index(rows: usize, cols: usize, s: [isize; 2]) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * s[0] as usize + (cols - 1) * s[1] as usize
}

#[allow(clippy::too_many_arguments)]
fn check_views(m: usize, k: usize, n: usize, la: usize, sa: [isize; 2], lb: usize, sb: [isize; 2], lc: usize, sc: [isize; 2]) {
    let ok = m * n == 0
        || (m * k == 0 || last_index(m, k, sa) < la) && (k * n == 0 || last_index(k, n, sb) < lb) && last_index(m, n, sc) < lc;
    assert!(ok, "gemm view out of bounds");
    assert!(sa.iter().chain(&sb).chain(&sc).all(|s| *s >= 0), "negative gemm stride");
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], c: &mut [Self], sc: [isize; 2]) {
        check_views(m, k, n, a.len(), sa, b.len(), sb, c.len(), sc);
        if m * n == 0 {
            return;
        }
        // SAFETY: every element addressed by the three views is in bounds
        // (checked above) and `c` does not alias `a` or `b`.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), sa[0], sa[1], b.as_ptr(), sb[0], sb[1], 1.0, c.as_mut_ptr(), sc[0], sc[1],
            )
        }
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn lit(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], c: &mut [Self], sc: [isize; 2]) {
        check_views(m, k, n, a.len(), sa, b.len(), sb, c.len(), sc);
        if m * n == 0 {
            return;
        }
        // SAFETY: every element addressed by the three views is in bounds
        // (checked above) and `c` does not alias `a` or `b`.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), sa[0], sa[1], b.as_ptr(), sb[0], sb[1], 1.0, c.as_mut_ptr(), sc[0], sc[1],
            )
        }
    }
}
