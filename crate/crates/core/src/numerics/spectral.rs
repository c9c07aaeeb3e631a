//! Fourier-domain view of multi-channel circular convolutions.
//!
//! A circular convolution with weights `c_out x c_in x k x k` on an `h x w`
//! grid is block-diagonalized by the 2-D DFT: at every spatial frequency `f`
//! it acts as a `c_out x c_in` complex matrix on the channel vector `x̂[f]`.
//! Real operators satisfy `B[-f] = conj(B[f])`, so only one representative
//! of each `{f, -f}` pair is ever multiplied; the partner is mirrored.

use num_complex::Complex;
use num_traits::Zero;

use crate::error::{Error, Result};

use super::{ComplexMatrix, Fft2, Real, Tensor};

/// Index bookkeeping for the non-redundant half of an `h x w` spectrum.
#[derive(Clone, Debug)]
pub struct HalfSpectrum {
    h: usize,
    w: usize,
    mirror: Vec<usize>,
    reps: Vec<usize>,
}

impl HalfSpectrum {
    pub fn new(h: usize, w: usize) -> Self {
        let mirror: Vec<usize> = (0..h * w)
            .map(|f| {
                let (u, v) = (f / w, f % w);
                ((h - u) % h) * w + (w - v) % w
            })
            .collect();
        let reps = (0..h * w).filter(|&f| f <= mirror[f]).collect();
        Self { h, w, mirror, reps }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Frequencies `f` with `f <= mirror(f)`.
    pub fn representatives(&self) -> &[usize] {
        &self.reps
    }

    #[inline]
    pub fn mirror(&self, f: usize) -> usize {
        self.mirror[f]
    }

    #[inline]
    pub fn is_self_conjugate(&self, f: usize) -> bool {
        self.mirror[f] == f
    }
}

/// Spectra of a batch of multi-channel planes, laid out `[batch][channel][freq]`.
#[derive(Clone, Debug)]
pub struct SpectralBatch<T> {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<Complex<T>>,
}

impl<T: Real> SpectralBatch<T> {
    /// Transforms a real `[batch, channels, h, w]` tensor.
    pub fn forward(x: &Tensor<T>, plan: &Fft2<T>) -> Result<Self> {
        let (batch, channels, h, w) = dims4(x)?;
        if (h, w) != plan.dims() {
            return Err(Error::ShapeMismatch {
                expected: vec![batch, channels, plan.dims().0, plan.dims().1],
                found: x.shape().to_vec(),
            });
        }
        let mut data: Vec<Complex<T>> = x.data().iter().map(|&v| Complex::new(v, T::zero())).collect();
        plan.forward(&mut data);
        Ok(Self {
            batch,
            channels,
            h,
            w,
            data,
        })
    }

    pub fn zeros(batch: usize, channels: usize, h: usize, w: usize) -> Self {
        Self {
            batch,
            channels,
            h,
            w,
            data: vec![Complex::zero(); batch * channels * h * w],
        }
    }

    #[inline]
    pub fn freq_count(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, f: usize) -> Complex<T> {
        self.data[(b * self.channels + c) * self.h * self.w + f]
    }

    /// Inverse transform, keeping the real part.
    pub fn inverse_real(mut self, plan: &Fft2<T>) -> Tensor<T> {
        plan.inverse(&mut self.data);
        let shape = [self.batch, self.channels, self.h, self.w];
        let data = self.data.into_iter().map(|v| v.re).collect();
        Tensor::new(shape.to_vec(), data).expect("spectral batch shape is consistent")
    }

    fn gather(&self, b: usize, f: usize, out: &mut [Complex<T>]) {
        let n = self.freq_count();
        let base = b * self.channels * n + f;
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.data[base + c * n];
        }
    }

    fn scatter(&mut self, b: usize, f: usize, values: &[Complex<T>], mirror: usize) {
        let n = self.freq_count();
        let base = b * self.channels * n;
        for (c, &v) in values.iter().enumerate() {
            self.data[base + c * n + f] = v;
            if mirror != f {
                self.data[base + c * n + mirror] = v.conj();
            }
        }
    }
}

pub(crate) fn dims4<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref other => Err(Error::InvalidShape(format!(
            "expected a [batch, channels, h, w] tensor, got {other:?}"
        ))),
    }
}

/// Per-frequency complex matrices of a real multi-channel circular operator.
#[derive(Clone, Debug)]
pub struct FreqBlockOperator<T> {
    h: usize,
    w: usize,
    c_out: usize,
    c_in: usize,
    blocks: Vec<ComplexMatrix<T>>,
}

impl<T: Real> FreqBlockOperator<T> {
    pub fn new(h: usize, w: usize, blocks: Vec<ComplexMatrix<T>>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::InvalidShape("operator without frequency blocks".into()))?;
        let (c_out, c_in) = (first.rows(), first.cols());
        if blocks.len() != h * w || blocks.iter().any(|b| b.rows() != c_out || b.cols() != c_in) {
            return Err(Error::InvalidShape(format!(
                "expected {} blocks of {c_out}x{c_in}",
                h * w
            )));
        }
        Ok(Self {
            h,
            w,
            c_out,
            c_in,
            blocks,
        })
    }

    /// The identity operator on `channels` channels.
    pub fn identity(h: usize, w: usize, channels: usize) -> Self {
        Self {
            h,
            w,
            c_out: channels,
            c_in: channels,
            blocks: vec![ComplexMatrix::identity(channels); h * w],
        }
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn freq_count(&self) -> usize {
        self.h * self.w
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn blocks(&self) -> &[ComplexMatrix<T>] {
        &self.blocks
    }

    pub fn block(&self, f: usize) -> &ComplexMatrix<T> {
        &self.blocks[f]
    }

    /// Largest deviation from `B[-f] = conj(B[f])` over all frequencies.
    pub fn conjugate_symmetry_error(&self) -> T {
        let half = HalfSpectrum::new(self.h, self.w);
        (0..self.freq_count())
            .map(|f| self.blocks[f].max_abs_diff(&self.blocks[half.mirror(f)].conj()))
            .fold(T::zero(), T::max)
    }

    /// Per-frequency conjugate transpose: the operator of the transposed convolution.
    pub fn adjoint(&self) -> Self {
        Self {
            h: self.h,
            w: self.w,
            c_out: self.c_in,
            c_in: self.c_out,
            blocks: self.blocks.iter().map(ComplexMatrix::conj_transpose).collect(),
        }
    }

    /// `y[f] = B[f] x[f]` on spectra.
    pub fn apply_spectral(&self, x: &SpectralBatch<T>, half: &HalfSpectrum) -> Result<SpectralBatch<T>> {
        self.check_spectral(x, self.c_in)?;
        let mut out = SpectralBatch::zeros(x.batch, self.c_out, self.h, self.w);
        let mut xin = vec![Complex::zero(); self.c_in];
        let mut yout = vec![Complex::zero(); self.c_out];
        for b in 0..x.batch {
            for &f in half.representatives() {
                x.gather(b, f, &mut xin);
                self.blocks[f].matvec(&xin, &mut yout);
                out.scatter(b, f, &yout, half.mirror(f));
            }
        }
        Ok(out)
    }

    /// `x[f] = B[f]ᴴ y[f]` on spectra, without materializing the adjoint.
    pub fn apply_adjoint_spectral(&self, y: &SpectralBatch<T>, half: &HalfSpectrum) -> Result<SpectralBatch<T>> {
        self.check_spectral(y, self.c_out)?;
        let mut out = SpectralBatch::zeros(y.batch, self.c_in, self.h, self.w);
        let mut yin = vec![Complex::zero(); self.c_out];
        let mut xout = vec![Complex::zero(); self.c_in];
        for b in 0..y.batch {
            for &f in half.representatives() {
                y.gather(b, f, &mut yin);
                self.blocks[f].matvec_adjoint(&yin, &mut xout);
                out.scatter(b, f, &xout, half.mirror(f));
            }
        }
        Ok(out)
    }

    /// Applies the operator to a real `[batch, c_in, h, w]` tensor.
    pub fn apply(&self, x: &Tensor<T>, plan: &Fft2<T>) -> Result<Tensor<T>> {
        let half = HalfSpectrum::new(self.h, self.w);
        let xs = SpectralBatch::forward(x, plan)?;
        Ok(self.apply_spectral(&xs, &half)?.inverse_real(plan))
    }

    fn check_spectral(&self, x: &SpectralBatch<T>, channels: usize) -> Result<()> {
        if x.channels != channels || (x.h, x.w) != (self.h, self.w) {
            return Err(Error::ShapeMismatch {
                expected: vec![x.batch, channels, self.h, self.w],
                found: vec![x.batch, x.channels, x.h, x.w],
            });
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> FreqBlockOperator<U> {
        FreqBlockOperator {
            h: self.h,
            w: self.w,
            c_out: self.c_out,
            c_in: self.c_in,
            blocks: self.blocks.iter().map(ComplexMatrix::cast).collect(),
        }
    }
}

/// Padded-grid offset of kernel tap `p` for a kernel of size `k` on an axis
/// of length `n`. Taps are centered and flipped so that the spatial operator
/// reads `y[r] = Σ_p w[p] x[r + p - k/2]` with wrap-around.
#[inline]
pub(crate) fn tap_offset(p: usize, k: usize, n: usize) -> usize {
    ((k / 2) as isize - p as isize).rem_euclid(n as isize) as usize
}

fn kernel_dims<T: Real>(weights: &Tensor<T>, h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
    let (c_out, c_in, kh, kw) = dims4(weights)?;
    if kh > h || kw > w || kh == 0 || kw == 0 {
        return Err(Error::InvalidShape(format!(
            "kernel {kh}x{kw} does not fit a {h}x{w} grid"
        )));
    }
    Ok((c_out, c_in, kh, kw))
}

/// Fourier blocks `Ŵ[f]` of the circular convolution with `weights`
/// (`[c_out, c_in, k, k]`) on an `h x w` grid.
pub fn kernel_spectrum<T: Real>(weights: &Tensor<T>, plan: &Fft2<T>) -> Result<FreqBlockOperator<T>> {
    let (h, w) = plan.dims();
    let (c_out, c_in, kh, kw) = kernel_dims(weights, h, w)?;
    let n = h * w;
    let mut planes = vec![Complex::<T>::zero(); c_out * c_in * n];
    for o in 0..c_out {
        for i in 0..c_in {
            let base = (o * c_in + i) * n;
            for p in 0..kh {
                for q in 0..kw {
                    let v = weights.data()[((o * c_in + i) * kh + p) * kw + q];
                    let idx = base + tap_offset(p, kh, h) * w + tap_offset(q, kw, w);
                    planes[idx] = Complex::new(v, T::zero());
                }
            }
        }
    }
    plan.forward(&mut planes);
    let blocks = (0..n)
        .map(|f| ComplexMatrix::from_fn(c_out, c_in, |o, i| planes[(o * c_in + i) * n + f]))
        .collect();
    FreqBlockOperator::new(h, w, blocks)
}

/// Pulls a full-spectrum gradient `∂L/∂Ŵ[f]` (in the `Re⟨G, dŴ⟩` convention)
/// back to the spatial kernel taps.
pub(crate) fn kernel_gradient<T: Real>(
    grad_blocks: &[ComplexMatrix<T>],
    kernel_shape: &[usize],
    plan: &Fft2<T>,
) -> Tensor<T> {
    let (h, w) = plan.dims();
    let n = h * w;
    let (c_out, c_in, kh, kw) = (kernel_shape[0], kernel_shape[1], kernel_shape[2], kernel_shape[3]);
    let mut planes = vec![Complex::<T>::zero(); c_out * c_in * n];
    for (f, g) in grad_blocks.iter().enumerate() {
        for o in 0..c_out {
            for i in 0..c_in {
                planes[(o * c_in + i) * n + f] = g[(o, i)];
            }
        }
    }
    plan.inverse_unnormalized(&mut planes);
    let mut out = Tensor::zeros(kernel_shape);
    let data = out.data_mut();
    for o in 0..c_out {
        for i in 0..c_in {
            let base = (o * c_in + i) * n;
            for p in 0..kh {
                for q in 0..kw {
                    let idx = base + tap_offset(p, kh, h) * w + tap_offset(q, kw, w);
                    data[((o * c_in + i) * kh + p) * kw + q] = planes[idx].re;
                }
            }
        }
    }
    out
}

/// `G[f] = (1 / hw) Σ_b ĝ_b[f] x̂_b[f]ᴴ`: the gradient of a real loss with
/// respect to the per-frequency blocks of a spectral operator, given input
/// spectra `x` and output-gradient spectra `g`. Mirrored to the full spectrum.
pub(crate) fn block_gradient<T: Real>(
    x: &SpectralBatch<T>,
    g: &SpectralBatch<T>,
    half: &HalfSpectrum,
) -> Vec<ComplexMatrix<T>> {
    let n = x.freq_count();
    let scale = T::one() / T::lit(n as f64);
    let mut blocks = vec![ComplexMatrix::zeros(g.channels, x.channels); n];
    let mut xv = vec![Complex::zero(); x.channels];
    let mut gv = vec![Complex::zero(); g.channels];
    for &f in half.representatives() {
        let block = &mut blocks[f];
        for b in 0..x.batch {
            x.gather(b, f, &mut xv);
            g.gather(b, f, &mut gv);
            for (o, &go) in gv.iter().enumerate() {
                let row = &mut block.entries_mut()[o * x.channels..(o + 1) * x.channels];
                for (slot, &xi) in row.iter_mut().zip(&xv) {
                    *slot = *slot + go * xi.conj();
                }
            }
        }
        for v in block.entries_mut() {
            *v = *v * scale;
        }
    }
    mirror_blocks(&mut blocks, half);
    blocks
}

/// Fills every non-representative frequency with the conjugate of its partner.
pub(crate) fn mirror_blocks<T: Real>(blocks: &mut [ComplexMatrix<T>], half: &HalfSpectrum) {
    for &f in half.representatives() {
        let m = half.mirror(f);
        if m != f {
            blocks[m] = blocks[f].conj();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_spectrum_covers_every_pair_once() {
        for (h, w) in [(1, 1), (2, 3), (4, 4), (7, 7), (5, 6)] {
            let half = HalfSpectrum::new(h, w);
            let mut seen = vec![0; h * w];
            for &f in half.representatives() {
                seen[f] += 1;
                if half.mirror(f) != f {
                    seen[half.mirror(f)] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "{h}x{w}");
        }
    }

    #[test]
    fn kernel_spectrum_is_conjugate_symmetric() {
        let plan = Fft2::<f64>::new(5, 4).unwrap();
        let w = Tensor::from_fn(&[2, 3, 3, 3], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
        let op = kernel_spectrum(&w, &plan).unwrap();
        assert!(op.conjugate_symmetry_error() < 1e-12);
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let plan = Fft2::<f64>::new(2, 2).unwrap();
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(kernel_spectrum(&w, &plan).is_err());
    }
}
