use std::ops::{Index, IndexMut};

use num_complex::Complex;
use num_traits::{One, Zero};

use crate::error::{Error, Result};

use super::{Real, PIVOT_TOLERANCE};

/// Small dense complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix<T> {
    rows: usize,
    cols: usize,
    entries: Vec<Complex<T>>,
}

impl<T: Real> ComplexMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![Complex::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                entries.push(f(r, c));
            }
        }
        Self {
            rows,
            cols,
            entries,
        }
    }

    pub fn from_entries(rows: usize, cols: usize, entries: Vec<Complex<T>>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            entries,
        })
    }

    pub fn diagonal(values: &[Complex<T>]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn entries(&self) -> &[Complex<T>] {
        &self.entries
    }

    #[inline]
    pub fn entries_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.entries
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                expected: vec![self.cols, other.cols],
                found: vec![other.rows, other.cols],
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let lhs = &self.entries[r * self.cols..(r + 1) * self.cols];
            let dst = &mut out.entries[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in lhs.iter().enumerate() {
                if a.is_zero() {
                    continue;
                }
                let rhs = &other.entries[k * other.cols..(k + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(rhs) {
                    *d = *d + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `y = M x` for a vector `x` of length `cols`.
    pub fn matvec(&self, x: &[Complex<T>], y: &mut [Complex<T>]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (r, out) in y.iter_mut().enumerate() {
            let row = &self.entries[r * self.cols..(r + 1) * self.cols];
            *out = row
                .iter()
                .zip(x)
                .fold(Complex::zero(), |acc, (&a, &b)| acc + a * b);
        }
    }

    /// `y = Mᴴ x` for a vector `x` of length `rows`.
    pub fn matvec_adjoint(&self, x: &[Complex<T>], y: &mut [Complex<T>]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        y.iter_mut().for_each(|v| *v = Complex::zero());
        for (r, &xr) in x.iter().enumerate() {
            let row = &self.entries[r * self.cols..(r + 1) * self.cols];
            for (out, &a) in y.iter_mut().zip(row) {
                *out = *out + a.conj() * xr;
            }
        }
    }

    pub fn conj_transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn conj(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|v| v.conj()).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: Complex<T>) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|&v| v * factor).collect(),
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(Complex<T>, Complex<T>) -> Complex<T>) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                expected: vec![self.rows, self.cols],
                found: vec![other.rows, other.cols],
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Largest entrywise modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.entries
            .iter()
            .zip(&other.entries)
            .fold(T::zero(), |acc, (a, b)| acc.max((*a - *b).norm()))
    }

    /// Copies the top-left `rows x cols` block.
    pub fn block(&self, rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |r, c| self[(r, c)])
    }

    /// Zero-pads into the top-left corner of an `n x n` matrix.
    pub fn embed(&self, n: usize) -> Self {
        let mut out = Self::zeros(n, n);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(r, c)] = self[(r, c)];
            }
        }
        out
    }

    /// Inverse by LU factorization with partial pivoting.
    pub fn inverse(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::InvalidShape(format!(
                "inverse of non-square {}x{} matrix",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        let mut lu = self.entries.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let tol = T::lit(PIVOT_TOLERANCE);

        for col in 0..n {
            let (pivot_row, pivot_mag) = (col..n)
                .map(|r| (r, lu[r * n + col].norm()))
                .fold((col, -T::one()), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pivot_mag > tol) {
                return Err(Error::SingularMatrix {
                    pivot: pivot_mag.to_f64(),
                    column: col,
                });
            }
            if pivot_row != col {
                for c in 0..n {
                    lu.swap(col * n + c, pivot_row * n + c);
                }
                perm.swap(col, pivot_row);
            }
            let pivot = lu[col * n + col];
            for r in col + 1..n {
                let factor = lu[r * n + col] / pivot;
                lu[r * n + col] = factor;
                if factor.is_zero() {
                    continue;
                }
                for c in col + 1..n {
                    let upper = lu[col * n + c];
                    lu[r * n + c] = lu[r * n + c] - factor * upper;
                }
            }
        }

        // Solve L U x = P e_j column by column.
        let mut inv = Self::zeros(n, n);
        let mut x = vec![Complex::<T>::zero(); n];
        for j in 0..n {
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = if perm[i] == j {
                    Complex::one()
                } else {
                    Complex::zero()
                };
            }
            for i in 0..n {
                let mut acc = x[i];
                for k in 0..i {
                    acc = acc - lu[i * n + k] * x[k];
                }
                x[i] = acc;
            }
            for i in (0..n).rev() {
                let mut acc = x[i];
                for k in i + 1..n {
                    acc = acc - lu[i * n + k] * x[k];
                }
                x[i] = acc / lu[i * n + i];
            }
            for i in 0..n {
                inv[(i, j)] = x[i];
            }
        }
        Ok(inv)
    }

    pub fn cast<U: Real>(&self) -> ComplexMatrix<U> {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            entries: self
                .entries
                .iter()
                .map(|v| Complex::new(U::lit(v.re.to_f64()), U::lit(v.im.to_f64())))
                .collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for ComplexMatrix<T> {
    type Output = Complex<T>;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &Complex<T> {
        &self.entries[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for ComplexMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex<T> {
        &mut self.entries[r * self.cols + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    #[test]
    fn identity_inverse_is_identity() {
        let id = ComplexMatrix::<f64>::identity(3);
        assert_eq!(id.inverse().unwrap(), id);
    }

    #[test]
    fn diagonal_inverse() {
        let m = ComplexMatrix::diagonal(&[c(2.0, 0.0), c(0.0, 4.0)]);
        let inv = m.inverse().unwrap();
        let expected = ComplexMatrix::diagonal(&[c(0.5, 0.0), c(0.0, -0.25)]);
        assert!(inv.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn random_well_conditioned_multiply_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            // Diagonally dominant keeps the condition number bounded.
            let m = ComplexMatrix::from_fn(6, 6, |r, col| {
                let base = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                if r == col {
                    base + c(8.0, 0.0)
                } else {
                    base
                }
            });
            let prod = m.matmul(&m.inverse().unwrap()).unwrap();
            assert!(prod.max_abs_diff(&ComplexMatrix::identity(6)) < 1e-10);
        }
    }

    #[test]
    fn pivoting_handles_zero_leading_entry() {
        let m = ComplexMatrix::from_entries(2, 2, vec![c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]).unwrap();
        let inv = m.inverse().unwrap();
        assert!(inv.max_abs_diff(&m) < 1e-15);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let m = ComplexMatrix::from_entries(2, 2, vec![c(1.0, 0.0), c(2.0, 0.0), c(2.0, 0.0), c(4.0, 0.0)]).unwrap();
        assert!(matches!(m.inverse(), Err(Error::SingularMatrix { column: 1, .. })));
    }

    #[test]
    fn adjoint_matvec_matches_conj_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ComplexMatrix::from_fn(3, 4, |_, _| c(rng.gen(), rng.gen()));
        let x: Vec<_> = (0..3).map(|_| c(rng.gen(), rng.gen())).collect();
        let mut y1 = vec![Complex::zero(); 4];
        let mut y2 = vec![Complex::zero(); 4];
        m.matvec_adjoint(&x, &mut y1);
        m.conj_transpose().matvec(&x, &mut y2);
        for (a, b) in y1.iter().zip(&y2) {
            assert!((a - b).norm() < 1e-14);
        }
    }
}
