//! B-spline bases on equidistant knots and difference penalties.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// A B-spline basis of `n_basis` functions of the given degree on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec<T> {
    pub degree: usize,
    pub n_basis: usize,
    pub lo: T,
    pub hi: T,
    pub penalty_order: usize,
}

impl<T: Scalar> SplineSpec<T> {
    pub fn new(degree: usize, n_basis: usize, lo: T, hi: T, penalty_order: usize) -> Result<Self> {
        let spec = Self {
            degree,
            n_basis,
            lo,
            hi,
            penalty_order,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Cubic basis with a second-order penalty.
    pub fn cubic(n_basis: usize, lo: T, hi: T) -> Result<Self> {
        Self::new(3, n_basis, lo, hi, 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Config(format!(
                "spline range must satisfy lo < hi, got ({}, {})",
                self.lo, self.hi
            )));
        }
        if self.n_basis < self.degree + 1 {
            return Err(Error::Config(format!(
                "n_basis = {} must be at least degree + 1 = {}",
                self.n_basis,
                self.degree + 1
            )));
        }
        if self.penalty_order == 0 || self.penalty_order >= self.n_basis {
            return Err(Error::Config(format!(
                "penalty order {} must lie in 1..{}",
                self.penalty_order, self.n_basis
            )));
        }
        Ok(())
    }

    fn n_spans(&self) -> usize {
        self.n_basis - self.degree
    }

    fn spacing(&self) -> T {
        (self.hi - self.lo) / T::from_usize_lossy(self.n_spans())
    }

    /// Full knot vector: equidistant over the range, extended by `degree` knots on each side.
    pub fn knots(&self) -> Vec<T> {
        let h = self.spacing();
        (0..self.n_basis + self.degree + 1)
            .map(|i| self.lo + (T::from_usize_lossy(i) - T::from_usize_lossy(self.degree)) * h)
            .collect()
    }

    /// Knot span `s` with `knots[s] < x <= knots[s + 1]` (the first span also holds `lo`).
    fn span(&self, x: T, knots: &[T]) -> usize {
        let first = self.degree;
        let last = self.degree + self.n_spans() - 1;
        let guess = ((x - self.lo) / self.spacing()).ceil().to_usize().unwrap_or(0);
        let mut s = (first + guess.saturating_sub(1)).clamp(first, last);
        while s > first && x <= knots[s] {
            s -= 1;
        }
        while s < last && x > knots[s + 1] {
            s += 1;
        }
        s
    }

    fn clamp(&self, x: T) -> T {
        x.max(self.lo).min(self.hi)
    }

    /// Values of the `degree + 1` basis functions that are non-zero at `x`,
    /// starting at function index `first`.
    fn local_values(&self, degree: usize, x: T, knots: &[T]) -> (usize, Vec<T>) {
        let s = self.span(x, knots);
        let mut n = vec![T::zero(); degree + 1];
        let mut left = vec![T::zero(); degree + 1];
        let mut right = vec![T::zero(); degree + 1];
        n[0] = T::one();
        for j in 1..=degree {
            left[j] = x - knots[s + 1 - j];
            right[j] = knots[s + j] - x;
            let mut saved = T::zero();
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        (s - degree, n)
    }

    /// Basis row at `x` (clamped into the range).
    pub fn eval(&self, x: T) -> Array1<T> {
        let knots = self.knots();
        let mut row = Array1::zeros(self.n_basis);
        let (first, vals) = self.local_values(self.degree, self.clamp(x), &knots);
        for (k, v) in vals.into_iter().enumerate() {
            row[first + k] = v;
        }
        row
    }

    /// First derivative of every basis function at `x` (clamped into the range).
    pub fn eval_derivative(&self, x: T) -> Array1<T> {
        let mut row = Array1::zeros(self.n_basis);
        if self.degree == 0 {
            return row;
        }
        let knots = self.knots();
        let p = self.degree;
        let x = self.clamp(x);
        let s = self.span(x, &knots);
        // degree p-1 functions s-p+1..=s
        let (first_lower, lower) = self.local_values(p - 1, x, &knots);
        let lower_at = |i: usize| -> T {
            if i >= first_lower && i < first_lower + lower.len() {
                lower[i - first_lower]
            } else {
                T::zero()
            }
        };
        let pf = T::from_usize_lossy(p);
        for i in (s - p)..=s {
            let a = lower_at(i) / (knots[i + p] - knots[i]);
            let b = lower_at(i + 1) / (knots[i + p + 1] - knots[i + 1]);
            row[i] = pf * (a - b);
        }
        row
    }
}

/// Design matrix with one row of basis values per input.
pub fn bspline_design<T: Scalar>(x: ArrayView1<'_, T>, spec: &SplineSpec<T>) -> Result<Array2<T>> {
    spec.validate()?;
    let knots = spec.knots();
    let mut out = Array2::zeros((x.len(), spec.n_basis));
    for (r, &xv) in x.iter().enumerate() {
        let (first, vals) = spec.local_values(spec.degree, spec.clamp(xv), &knots);
        for (k, v) in vals.into_iter().enumerate() {
            out[[r, first + k]] = v;
        }
    }
    Ok(out)
}

pub fn bspline_derivative_design<T: Scalar>(
    x: ArrayView1<'_, T>,
    spec: &SplineSpec<T>,
) -> Result<Array2<T>> {
    spec.validate()?;
    let mut out = Array2::zeros((x.len(), spec.n_basis));
    for (r, &xv) in x.iter().enumerate() {
        out.row_mut(r).assign(&spec.eval_derivative(xv));
    }
    Ok(out)
}

/// Symmetric PSD penalty `D^T D` for a coefficient block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyMatrix<T> {
    pub matrix: Array2<T>,
}

impl<T: Scalar> PenaltyMatrix<T> {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn quadratic_form(&self, theta: ArrayView1<'_, T>) -> T {
        theta.dot(&self.matrix.dot(&theta))
    }
}

/// Forward-difference operator of the given order, shape `(m - order) x m`.
pub fn difference_matrix<T: Scalar>(m: usize, order: usize) -> Result<Array2<T>> {
    if order == 0 || order >= m {
        return Err(Error::Config(format!(
            "difference order {order} must lie in 1..{m}"
        )));
    }
    // binomial coefficients with alternating sign, lowest index first
    let mut coef = vec![1i64];
    for _ in 0..order {
        let mut next = vec![0i64; coef.len() + 1];
        for (k, &c) in coef.iter().enumerate() {
            next[k] -= c;
            next[k + 1] += c;
        }
        coef = next;
    }
    let mut d = Array2::zeros((m - order, m));
    for r in 0..(m - order) {
        for (k, &c) in coef.iter().enumerate() {
            d[[r, r + k]] = T::lit(c as f64);
        }
    }
    Ok(d)
}

pub fn difference_penalty<T: Scalar>(m: usize, order: usize) -> Result<PenaltyMatrix<T>> {
    let d = difference_matrix::<T>(m, order)?;
    Ok(PenaltyMatrix {
        matrix: d.t().dot(&d),
    })
}

/// Orthonormal basis `Z` (`M x (M-1)`) of the complement of the column-sum vector.
/// Multiplying a design by `Z` absorbs a sum-to-zero constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterTransform<T> {
    pub z: Array2<T>,
}

impl<T: Scalar> CenterTransform<T> {
    /// Householder construction: with `H c = -sign(c_1)|c| e_1`, the trailing
    /// columns of `H` are orthogonal to `c`.
    pub fn from_column_sums(sums: ArrayView1<'_, T>) -> Result<Self> {
        let m = sums.len();
        if m < 2 {
            return Err(Error::Shape(format!(
                "centering needs at least 2 columns, got {m}"
            )));
        }
        let norm = sums.dot(&sums).sqrt();
        let mut h = Array2::<T>::eye(m);
        if norm > T::zero() {
            let mut v = sums.to_owned();
            let sign = if sums[0] >= T::zero() { T::one() } else { -T::one() };
            v[0] += sign * norm;
            let vv = v.dot(&v);
            let two = T::lit(2.0);
            for i in 0..m {
                for j in 0..m {
                    h[[i, j]] -= two * v[i] * v[j] / vv;
                }
            }
        }
        Ok(Self {
            z: h.slice(ndarray::s![.., 1..]).to_owned(),
        })
    }

    pub fn n_constrained(&self) -> usize {
        self.z.ncols()
    }

    pub fn apply(&self, design: ArrayView2<'_, T>) -> Array2<T> {
        design.dot(&self.z)
    }

    pub fn apply_row(&self, row: ArrayView1<'_, T>) -> Array1<T> {
        row.dot(&self.z)
    }

    /// Maps constrained coefficients back to the original basis.
    pub fn expand(&self, theta: ArrayView1<'_, T>) -> Array1<T> {
        self.z.dot(&theta)
    }

    pub fn penalty(&self, penalty: &PenaltyMatrix<T>) -> PenaltyMatrix<T> {
        PenaltyMatrix {
            matrix: self.z.t().dot(&penalty.matrix).dot(&self.z),
        }
    }
}

/// Reparametrizes `design` so that every column sums to zero.
pub fn center_constraint<T: Scalar>(
    design: ArrayView2<'_, T>,
) -> Result<(Array2<T>, CenterTransform<T>)> {
    let sums = design.sum_axis(Axis(0));
    let transform = CenterTransform::from_column_sums(sums.view())?;
    Ok((transform.apply(design), transform))
}
