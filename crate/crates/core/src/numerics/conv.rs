//! Multi-channel circular convolution (stride 1, wrap-around indexing),
//! through the FFT and by direct summation.
//!
//! Convention: `y[o][r][s] = Σ_i Σ_{p,q} w[o][i][p][q] · x[i][r + p - k/2][s + q - k/2]`
//! with indices taken modulo the grid size.

use crate::error::{Error, Result};

use super::spectral::dims4;
use super::{kernel_spectrum, Fft2, Real, Tensor};

fn check_operands<T: Real>(x: &Tensor<T>, w: &Tensor<T>, channels_axis: usize) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (b, c, h, wd) = dims4(x)?;
    let (co, ci, kh, kw) = dims4(w)?;
    let expected = if channels_axis == 1 { ci } else { co };
    if c != expected {
        return Err(Error::ShapeMismatch {
            expected: vec![b, expected, h, wd],
            found: x.shape().to_vec(),
        });
    }
    if kh > h || kw > wd {
        return Err(Error::InvalidShape(format!(
            "kernel {kh}x{kw} exceeds grid {h}x{wd}"
        )));
    }
    Ok((b, co, ci, h, wd, kh, kw))
}

/// Circular convolution through the 2-D FFT: `ŷ[f] = Ŵ[f] x̂[f]`.
pub fn circular_conv<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, _, h, wd, _, _) = check_operands(x, w, 1)?;
    let plan = Fft2::new(h, wd)?;
    kernel_spectrum(w, &plan)?.apply(x, &plan)
}

/// Transposed circular convolution (the adjoint of [`circular_conv`]) through
/// the FFT: `x̂[f] = Ŵ[f]ᴴ ŷ[f]`.
pub fn conv_transpose<T: Real>(y: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, _, h, wd, _, _) = check_operands(y, w, 0)?;
    let plan = Fft2::new(h, wd)?;
    kernel_spectrum(w, &plan)?.adjoint().apply(y, &plan)
}

#[inline]
fn shift(p: usize, k: usize, n: usize) -> usize {
    (p as isize - (k / 2) as isize).rem_euclid(n as isize) as usize
}

/// `dst[s] += v * src[(s + d) mod n]`
#[inline]
fn axpy_wrapped<T: Real>(dst: &mut [T], src: &[T], d: usize, v: T) {
    let n = dst.len();
    let split = n - d;
    for (a, &b) in dst[..split].iter_mut().zip(&src[d..]) {
        *a = *a + v * b;
    }
    for (a, &b) in dst[split..].iter_mut().zip(&src[..d]) {
        *a = *a + v * b;
    }
}

/// `dst[(s + d) mod n] += v * src[s]`
#[inline]
fn axpy_scattered<T: Real>(dst: &mut [T], src: &[T], d: usize, v: T) {
    let n = dst.len();
    let split = n - d;
    for (a, &b) in dst[d..].iter_mut().zip(&src[..split]) {
        *a = *a + v * b;
    }
    for (a, &b) in dst[..d].iter_mut().zip(&src[split..]) {
        *a = *a + v * b;
    }
}

/// `Σ_s a[s] · b[(s + d) mod n]`
#[inline]
fn dot_wrapped<T: Real>(a: &[T], b: &[T], d: usize) -> T {
    let n = a.len();
    let split = n - d;
    let mut acc = T::zero();
    for (&x, &y) in a[..split].iter().zip(&b[d..]) {
        acc = acc + x * y;
    }
    for (&x, &y) in a[split..].iter().zip(&b[..d]) {
        acc = acc + x * y;
    }
    acc
}

/// Circular convolution by direct summation.
pub fn circular_conv_direct<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, co, ci, h, wd, kh, kw) = check_operands(x, w, 1)?;
    let plane = h * wd;
    let mut y = Tensor::zeros(&[batch, co, h, wd]);
    let (xd, wdat) = (x.data(), w.data());
    let yd = y.data_mut();
    for b in 0..batch {
        for o in 0..co {
            let out = &mut yd[(b * co + o) * plane..(b * co + o + 1) * plane];
            for i in 0..ci {
                let src = &xd[(b * ci + i) * plane..(b * ci + i + 1) * plane];
                for p in 0..kh {
                    let dr = shift(p, kh, h);
                    for q in 0..kw {
                        let v = wdat[((o * ci + i) * kh + p) * kw + q];
                        if v == T::zero() {
                            continue;
                        }
                        let dc = shift(q, kw, wd);
                        for r in 0..h {
                            let rr = (r + dr) % h;
                            axpy_wrapped(&mut out[r * wd..(r + 1) * wd], &src[rr * wd..(rr + 1) * wd], dc, v);
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Transposed circular convolution by direct summation.
pub fn conv_transpose_direct<T: Real>(y: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, co, ci, h, wd, kh, kw) = check_operands(y, w, 0)?;
    let plane = h * wd;
    let mut x = Tensor::zeros(&[batch, ci, h, wd]);
    let (yd, wdat) = (y.data(), w.data());
    let xd = x.data_mut();
    for b in 0..batch {
        for i in 0..ci {
            let out = &mut xd[(b * ci + i) * plane..(b * ci + i + 1) * plane];
            for o in 0..co {
                let src = &yd[(b * co + o) * plane..(b * co + o + 1) * plane];
                for p in 0..kh {
                    let dr = shift(p, kh, h);
                    for q in 0..kw {
                        let v = wdat[((o * ci + i) * kh + p) * kw + q];
                        if v == T::zero() {
                            continue;
                        }
                        let dc = shift(q, kw, wd);
                        for r in 0..h {
                            let rr = (r + dr) % h;
                            axpy_scattered(&mut out[rr * wd..(rr + 1) * wd], &src[r * wd..(r + 1) * wd], dc, v);
                        }
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Gradient of `⟨g, conv(x, w)⟩` with respect to `w`, by direct summation.
pub(crate) fn conv_weight_grad_direct<T: Real>(x: &Tensor<T>, g: &Tensor<T>, kernel_shape: &[usize]) -> Tensor<T> {
    let (co, ci, kh, kw) = (kernel_shape[0], kernel_shape[1], kernel_shape[2], kernel_shape[3]);
    let (batch, _, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let plane = h * wd;
    let mut grad = Tensor::zeros(kernel_shape);
    let gd = grad.data_mut();
    for b in 0..batch {
        for o in 0..co {
            let gy = &g.data()[(b * co + o) * plane..(b * co + o + 1) * plane];
            for i in 0..ci {
                let src = &x.data()[(b * ci + i) * plane..(b * ci + i + 1) * plane];
                for p in 0..kh {
                    let dr = shift(p, kh, h);
                    for q in 0..kw {
                        let dc = shift(q, kw, wd);
                        let mut acc = T::zero();
                        for r in 0..h {
                            let rr = (r + dr) % h;
                            acc = acc + dot_wrapped(&gy[r * wd..(r + 1) * wd], &src[rr * wd..(rr + 1) * wd], dc);
                        }
                        let idx = ((o * ci + i) * kh + p) * kw + q;
                        gd[idx] = gd[idx] + acc;
                    }
                }
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        for y in [circular_conv(&x, &w).unwrap(), circular_conv_direct(&x, &w).unwrap()] {
            for (a, b) in y.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shift_kernel_cycles_the_plane() {
        // 2x2 kernel with a single tap at (1, 0): y[r][s] = x[r][s - 1].
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut w = Tensor::zeros(&[1, 1, 2, 2]);
        w.data_mut()[2] = 1.0;
        // Frozen from the wrap-around summation oracle.
        let expected = [2.0, 1.0, 4.0, 3.0];
        let oracle = reference::direct_circular_conv(&x, &w);
        assert_eq!(oracle.data(), &expected);
        for y in [circular_conv(&x, &w), circular_conv_direct(&x, &w)] {
            let y = y.unwrap();
            for (a, b) in y.data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fft_and_direct_paths_match_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&mut rng, &[2, 3, 8, 8]);
        let w = random(&mut rng, &[4, 3, 3, 3]);
        let naive = reference::direct_circular_conv(&x, &w);
        let fft = circular_conv(&x, &w).unwrap();
        let direct = circular_conv_direct(&x, &w).unwrap();
        for ((a, b), c) in fft.data().iter().zip(direct.data()).zip(naive.data()) {
            assert!((a - c).abs() < 1e-9);
            assert!((b - c).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_matches_dense_materialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(&mut rng, &[2, 2, 3, 3]);
        let y = random(&mut rng, &[1, 2, 4, 4]);
        let dense = reference::dense_conv_matrix(&w, 4, 4);
        let expected = reference::dense_matvec_transposed(&dense, y.data());
        let fft = conv_transpose(&y, &w).unwrap();
        let direct = conv_transpose_direct(&y, &w).unwrap();
        for ((a, b), c) in fft.data().iter().zip(direct.data()).zip(&expected) {
            assert!((a - c).abs() < 1e-9);
            assert!((b - c).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_gradient_matches_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, &[2, 2, 5, 4]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let g = random(&mut rng, &[2, 3, 5, 4]);
        let grad = conv_weight_grad_direct(&x, &g, w.shape());
        // ⟨g, conv(x, w)⟩ is linear in w, so the gradient is exact against a basis probe.
        for idx in [0usize, 7, 20, 53] {
            let mut e = Tensor::zeros(w.shape());
            e.data_mut()[idx] = 1.0;
            let probe = circular_conv_direct(&x, &e).unwrap().dot(&g).unwrap();
            assert!((probe - grad.data()[idx]).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        assert!(matches!(circular_conv(&x, &w), Err(Error::ShapeMismatch { .. })));
        assert!(circular_conv_direct(&x, &w).is_err());
    }
}
