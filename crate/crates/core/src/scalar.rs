//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type for arrays, parameters, and coordinates.
///
/// Implemented for `f32` and `f64`. The network and the gradient-check
/// tolerances are calibrated for `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless widening used by the on-disk formats.
    fn to_f64_lossless(self) -> f64;
    fn from_f64_lossy(v: f64) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64_lossy(v)
    }

    /// `c += a · b` for strided row/column-major views; `a` is `m x k`,
    /// `b` is `k x n`, `c` is `m x n`.
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], c: &mut [Self], sc: [isize; 2]);
}

fn check_extent(len: usize, rows: usize, cols: usize, s: [isize; 2]) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) as isize * s[0] + (cols - 1) as isize * s[1];
        assert!(s[0] >= 0 && s[1] >= 0 && (last as usize) < len, "gemm view out of bounds");
    }
}

impl Real for f64 {
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], c: &mut [Self], sc: [isize; 2]) {
        check_extent(a.len(), m, k, sa);
        check_extent(b.len(), k, n, sb);
        check_extent(c.len(), m, n, sc);
        // SAFETY: every view was bounds-checked above and `c` does not alias `a` or `b`.
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), sa[0], sa[1], b.as_ptr(), sb[0], sb[1], 1.0, c.as_mut_ptr(), sc[0], sc[1]);
        }
    }
}

impl Real for f32 {
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: [isize; 2], b: &[Self], sb: [isize; 2], c: &mut [Self], sc: [isize; 2]) {
        check_extent(a.len(), m, k, sa);
        check_extent(b.len(), k, n, sb);
        check_extent(c.len(), m, n, sc);
        // SAFETY: every view was bounds-checked above and `c` does not alias `a` or `b`.
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), sa[0], sa[1], b.as_ptr(), sb[0], sb[1], 1.0, c.as_mut_ptr(), sc[0], sc[1]);
        }
    }
}

/// A 3D point or vector.
pub type Point3<T> = [T; 3];

#[inline]
pub fn sub3<T: Real>(a: &Point3<T>, b: &Point3<T>) -> Point3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add3<T: Real>(a: &Point3<T>, b: &Point3<T>) -> Point3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn dist2<T: Real>(a: &Point3<T>, b: &Point3<T>) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn norm3<T: Real>(a: &Point3<T>) -> T {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}
