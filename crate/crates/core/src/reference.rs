//! Slow reference implementations used as oracles by the test suites and
//! the `selftest` command. Nothing here shares code with the fast paths it
//! checks: DFTs are double loops, convolutions are materialized as dense
//! doubly block-circulant matrices, gradients are central differences.

use nalgebra::DMatrix;
use num_complex::Complex;

use crate::numerics::Tensor;

/// `X[u][v] = Σ_{r,s} x[r][s] e^{-2πi (ur/h + vs/w)}`
pub fn naive_dft2(x: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex::new(0.0, 0.0);
            for r in 0..h {
                for s in 0..w {
                    let phase = -2.0 * std::f64::consts::PI * ((u * r) as f64 / h as f64 + (v * s) as f64 / w as f64);
                    acc += Complex::from_polar(x[r * w + s], phase);
                }
            }
            out[u * w + v] = acc;
        }
    }
    out
}

/// Circular convolution by the defining sum, one output site at a time.
pub fn direct_circular_conv(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let mut y = Tensor::zeros(&[b, co, h, wd]);
    for n in 0..b {
        for o in 0..co {
            for r in 0..h {
                for s in 0..wd {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        for p in 0..kh {
                            for q in 0..kw {
                                let rr = (r as isize + p as isize - (kh / 2) as isize).rem_euclid(h as isize) as usize;
                                let ss = (s as isize + q as isize - (kw / 2) as isize).rem_euclid(wd as isize) as usize;
                                acc += w.data()[((o * ci + i) * kh + p) * kw + q] * x.data()[((n * ci + i) * h + rr) * wd + ss];
                            }
                        }
                    }
                    y.data_mut()[((n * co + o) * h + r) * wd + s] = acc;
                }
            }
        }
    }
    y
}

/// The `(c_out h w) x (c_in h w)` doubly block-circulant matrix of the
/// circular convolution with `w` on an `h x wd` grid, built by probing
/// [`direct_circular_conv`] with basis vectors.
pub fn dense_conv_matrix(w: &Tensor<f64>, h: usize, wd: usize) -> DMatrix<f64> {
    let (co, ci) = (w.shape()[0], w.shape()[1]);
    let (rows, cols) = (co * h * wd, ci * h * wd);
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        let mut e = Tensor::zeros(&[1, ci, h, wd]);
        e.data_mut()[j] = 1.0;
        let col = direct_circular_conv(&e, w);
        for (i, &v) in col.data().iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

pub fn dense_matvec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (m * nalgebra::DVector::from_column_slice(x)).iter().copied().collect()
}

pub fn dense_matvec_transposed(m: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    (m.transpose() * nalgebra::DVector::from_column_slice(y)).iter().copied().collect()
}

/// `(I - A)(I + A)^{-1}` evaluated densely.
pub fn dense_cayley(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let inv = (&id + a).try_inverse().expect("I + A is invertible for skew-symmetric A");
    (&id - a) * inv
}

pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    m.clone().svd(false, false).singular_values.iter().copied().collect()
}

/// Central-difference gradient of a scalar function.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖, floor)`
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_matrix_of_identity_kernel_is_identity() {
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let m = dense_conv_matrix(&w, 3, 2);
        assert_eq!(m, DMatrix::identity(6, 6));
    }

    #[test]
    fn cayley_of_zero_is_identity() {
        let z = DMatrix::zeros(3, 3);
        assert_eq!(dense_cayley(&z), DMatrix::identity(3, 3));
    }

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(&mut |x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }
}
