use std::sync::Arc;

use num_complex::Complex;
use num_traits::Zero;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Planned 2-D FFT for `h x w` planes. Planes are stored row-major and
/// contiguously, so one call can transform a whole batch of channels.
#[derive(Clone)]
pub struct Fft2<T: Real> {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for Fft2<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("h", &self.h).field("w", &self.w).finish()
    }
}

impl<T: Real> Fft2<T> {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!("FFT plane {h}x{w}")));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    /// Unnormalized forward transform of every plane in `buf`.
    pub fn forward(&self, buf: &mut [Complex<T>]) {
        self.run(buf, &self.row_fwd, &self.col_fwd);
    }

    /// Inverse transform of every plane in `buf`, scaled by `1 / (h w)`.
    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        self.inverse_unnormalized(buf);
        let scale = T::one() / T::lit((self.h * self.w) as f64);
        buf.iter_mut().for_each(|v| *v = *v * scale);
    }

    /// Inverse transform without the `1 / (h w)` factor.
    pub fn inverse_unnormalized(&self, buf: &mut [Complex<T>]) {
        self.run(buf, &self.row_inv, &self.col_inv);
    }

    fn run(&self, buf: &mut [Complex<T>], rows: &Arc<dyn Fft<T>>, cols: &Arc<dyn Fft<T>>) {
        let plane = self.plane_len();
        assert_eq!(buf.len() % plane, 0, "buffer is not a whole number of planes");
        if buf.is_empty() {
            return;
        }
        let scratch_len = rows
            .get_inplace_scratch_len()
            .max(cols.get_inplace_scratch_len());
        let mut scratch = vec![Complex::zero(); scratch_len];
        if self.w > 1 {
            rows.process_with_scratch(buf, &mut scratch);
        }
        if self.h > 1 {
            let (h, w) = (self.h, self.w);
            let mut transposed: Vec<Complex<T>> = buf
                .chunks_exact(plane)
                .flat_map(|src| (0..w).flat_map(move |c| (0..h).map(move |r| src[r * w + c])))
                .collect();
            cols.process_with_scratch(&mut transposed, &mut scratch);
            for (src, dst) in transposed.chunks_exact(plane).zip(buf.chunks_exact_mut(plane)) {
                transpose(src, dst, self.w, self.h);
            }
        }
    }
}

fn transpose<T: Copy>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// One complex `h x w` plane.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexPlane<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<Complex<T>>,
}

impl<T: Real> ComplexPlane<T> {
    pub fn real_part(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.h, self.w], |i| self.data[i].re)
    }

    pub fn max_imag(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, v| acc.max(v.im.abs()))
    }
}

/// 2-D DFT of a real `h x w` tensor.
pub fn fft2<T: Real>(x: &Tensor<T>) -> Result<ComplexPlane<T>> {
    let (h, w) = match x.shape() {
        &[h, w] => (h, w),
        other => {
            return Err(Error::InvalidShape(format!(
                "fft2 expects a 2-D plane, got {other:?}"
            )))
        }
    };
    let mut data: Vec<Complex<T>> = x.data().iter().map(|&v| Complex::new(v, T::zero())).collect();
    Fft2::new(h, w)?.forward(&mut data);
    Ok(ComplexPlane { h, w, data })
}

/// Normalized inverse 2-D DFT.
pub fn ifft2<T: Real>(x: &ComplexPlane<T>) -> Result<ComplexPlane<T>> {
    let mut data = x.data.clone();
    Fft2::new(x.h, x.w)?.inverse(&mut data);
    Ok(ComplexPlane {
        h: x.h,
        w: x.w,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::naive_dft2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_stay_zero() {
        let x = Tensor::<f64>::zeros(&[4, 4]);
        let s = fft2(&x).unwrap();
        assert!(s.data.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn constant_plane_has_only_dc() {
        let (h, w, c) = (3, 5, 1.5);
        let x = Tensor::<f64>::full(&[h, w], c);
        let s = fft2(&x).unwrap();
        assert!((s.data[0] - Complex::new(c * (h * w) as f64, 0.0)).norm() < 1e-12);
        for v in &s.data[1..] {
            assert!(v.norm() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_dft_on_5x7() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::from_fn(&[5, 7], |_| rng.gen_range(-1.0..1.0));
        let fast = fft2(&x).unwrap();
        let slow = naive_dft2(x.data(), 5, 7);
        for (a, b) in fast.data.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn round_trip_all_sizes_up_to_16() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for h in 1..=16 {
            for w in 1..=16 {
                let x = Tensor::<f64>::from_fn(&[h, w], |_| rng.gen_range(-1.0..1.0));
                let back = ifft2(&fft2(&x).unwrap()).unwrap();
                for (a, b) in back.data.iter().zip(x.data()) {
                    assert!((a.re - b).abs() < 1e-10 && a.im.abs() < 1e-10, "{h}x{w}");
                }
            }
        }
    }

    #[test]
    fn batched_planes_match_single_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plan = Fft2::<f64>::new(3, 4).unwrap();
        let planes: Vec<Complex<f64>> = (0..36).map(|_| Complex::new(rng.gen(), 0.0)).collect();
        let mut batched = planes.clone();
        plan.forward(&mut batched);
        for (chunk, expected) in planes.chunks(12).zip(batched.chunks(12)) {
            let mut single = chunk.to_vec();
            plan.forward(&mut single);
            assert_eq!(single, expected);
        }
    }

    #[test]
    fn rejects_empty_plane() {
        assert!(Fft2::<f64>::new(0, 3).is_err());
    }
}
