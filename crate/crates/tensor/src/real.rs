use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Scalar element type of tensors and tapes.
pub trait Real: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c[m×n] += a[m×k] · b[k×n]` where `a` and `b` are read through
    /// (row, column) strides and `c` is dense row-major.
    fn gemm_acc(m: usize, k: usize, n: usize, a: (&[Self], isize, isize), b: (&[Self], isize, isize), c: &mut [Self]);
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
        assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
    }
}

impl Real for f32 {
    fn gemm_acc(m: usize, k: usize, n: usize, a: (&[Self], isize, isize), b: (&[Self], isize, isize), c: &mut [Self]) {
        check_extent(a.0.len(), m, k, a.1, a.2);
        check_extent(b.0.len(), k, n, b.1, b.2);
        assert_eq!(c.len(), m * n);
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        // SAFETY: every operand access stays inside the extents checked above.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, 1.0, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn gemm_acc(m: usize, k: usize, n: usize, a: (&[Self], isize, isize), b: (&[Self], isize, isize), c: &mut [Self]) {
        check_extent(a.0.len(), m, k, a.1, a.2);
        check_extent(b.0.len(), k, n, b.1, b.2);
        assert_eq!(c.len(), m * n);
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        // SAFETY: every operand access stays inside the extents checked above.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, 1.0, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
