//! Small dense linear algebra needed by the Newton solver.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::Scalar;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    lower: Array2<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Returns `None` when a pivot is not strictly positive (or not finite).
    pub fn factor(a: ArrayView2<'_, T>) -> Option<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return None;
        }
        let mut l = Array2::<T>::zeros((n, n));
        for j in 0..n {
            let mut d = a[[j, j]];
            for k in 0..j {
                d -= l[[j, k]] * l[[j, k]];
            }
            if !(d > T::zero()) || !d.is_finite() {
                return None;
            }
            let djj = d.sqrt();
            l[[j, j]] = djj;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / djj;
            }
        }
        Some(Self { lower: l })
    }

    pub fn solve(&self, b: ArrayView1<'_, T>) -> Array1<T> {
        let n = self.lower.nrows();
        let l = &self.lower;
        let mut y = Array1::<T>::zeros(n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        let mut x = Array1::<T>::zeros(n);
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[k];
            }
            x[i] = s / l[[i, i]];
        }
        x
    }
}

/// Solves `a x = b` for symmetric `a`, retrying once with `ridge` added to the diagonal.
pub fn solve_spd_with_ridge<T: Scalar>(
    a: &Array2<T>,
    b: ArrayView1<'_, T>,
    ridge: T,
) -> Option<Array1<T>> {
    if let Some(ch) = Cholesky::factor(a.view()) {
        return Some(ch.solve(b));
    }
    let mut shifted = a.clone();
    for i in 0..shifted.nrows() {
        shifted[[i, i]] += ridge;
    }
    Cholesky::factor(shifted.view()).map(|ch| ch.solve(b))
}
