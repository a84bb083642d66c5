//! Thin safe wrapper over the `matrixmultiply` kernels.

/// Row-major view descriptor: `(rows, cols, row_stride, col_stride)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl View {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        ((self.rows - 1) as isize * self.rs + (self.cols - 1) as isize * self.cs) as usize
    }
}

/// `c = alpha · a · b + beta · c` with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(alpha: f64, a: &[f64], av: View, b: &[f64], bv: View, beta: f64, c: &mut [f64]) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimensions");
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    assert!(a.len() > av.max_offset() && b.len() > bv.max_offset());
    assert!(av.rs >= 0 && av.cs >= 0 && bv.rs >= 0 && bv.cs >= 0);
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed with at least m·n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_products() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3×2
        let mut c = [0.0; 4];
        gemm(1.0, &a, View::row_major(2, 3), &b, View::row_major(3, 2), 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // aᵀ·a, 3×3
        let mut d = [0.0; 9];
        gemm(1.0, &a, View::row_major(2, 3).t(), &a, View::row_major(2, 3), 0.0, &mut d);
        assert_eq!(d, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }
}

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Pivots below this fraction of the largest diagonal entry mark the matrix
/// as numerically singular.
const PIVOT_TOLERANCE: f64 = 1e-14;

/// `A = L Lᴴ` for Hermitian positive-definite `A`.
#[derive(Debug, Clone)]
pub(crate) struct HermitianCholesky {
    l: DMatrix<Complex64>,
}

impl HermitianCholesky {
    /// Returns `None` when a pivot is not real-positive within tolerance.
    /// Only the lower triangle of `a` is read.
    pub fn new(a: &DMatrix<Complex64>) -> Option<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols());
        let scale = (0..n).map(|i| a[(i, i)].re).fold(0.0, f64::max);
        if !(scale > 0.0) {
            return None;
        }
        let mut l = DMatrix::<Complex64>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if !(d > PIVOT_TOLERANCE * scale) {
                return None;
            }
            let djj = d.sqrt();
            l[(j, j)] = Complex64::new(djj, 0.0);
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s / djj;
            }
        }
        Some(Self { l })
    }

    /// Squared ratio of the extreme pivots; a cheap lower bound on cond₂(A).
    pub fn condition_estimate(&self) -> f64 {
        let n = self.l.nrows();
        let (lo, hi) = (0..n)
            .map(|i| self.l[(i, i)].re)
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
        (hi / lo).powi(2)
    }

    pub fn solve(&self, b: &DVector<Complex64>) -> DVector<Complex64> {
        let n = self.l.nrows();
        let l = &self.l;
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)].re;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[(k, i)].conj() * y[k];
            }
            y[i] = s / l[(i, i)].re;
        }
        y
    }
}
