//! Orthogonal circular convolutions through the Cayley transform.
//!
//! The kernel is moved to the Fourier domain, where the convolution is a
//! `c_out x c_in` matrix `Ŵ[f]` per frequency. Each block is made
//! skew-Hermitian, `A = Ŵ - Ŵᴴ` (the spectral form of `Conv - Convᵀ`), and
//! mapped to a unitary block `Q = (I - A)(I + A)⁻¹`. Because `Q[-f]` is the
//! conjugate of `Q[f]`, the spatial operator is real and orthogonal.
//!
//! Rectangular kernels are embedded in a `max(c_out, c_in)` square matrix,
//! transformed, and cropped back, which gives a semi-orthogonal operator.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::numerics::{
    kernel_spectrum, spectral, ComplexMatrix, Fft2, FreqBlockOperator, HalfSpectrum, Real, SpectralBatch, Tensor,
};
use crate::rng::Rng;

use super::{KernelWeights, LayerGrad, LayerTape, ORTHO_INIT_STD};

/// Maps a skew-Hermitian `A` to `(Q, (I + A)⁻¹)`.
pub type CayleyFn<T> = fn(&ComplexMatrix<T>) -> Result<(ComplexMatrix<T>, ComplexMatrix<T>)>;

/// `Q = (I - A)(I + A)⁻¹`, also returning the inverse for the backward pass.
pub fn cayley_square<T: Real>(a: &ComplexMatrix<T>) -> Result<(ComplexMatrix<T>, ComplexMatrix<T>)> {
    let id = ComplexMatrix::identity(a.rows());
    let inv = id.add(a)?.inverse()?;
    let q = id.sub(a)?.matmul(&inv)?;
    Ok((q, inv))
}

/// Cayley-orthogonalized circular convolution on a fixed spatial grid.
#[derive(Clone, Debug)]
pub struct OrthoConvOperator<T: Real> {
    pub source: KernelWeights<T>,
    /// Per-frequency blocks `Q[f]` (cropped to `c_out x c_in`).
    pub freq_op: FreqBlockOperator<T>,
    spatial_dims: (usize, usize),
    plan: Fft2<T>,
    half: HalfSpectrum,
    /// For representative frequencies: the square `Q` and `(I + A)⁻¹`.
    cache: Vec<Option<(ComplexMatrix<T>, ComplexMatrix<T>)>>,
}

pub fn cayley_orthogonalize<T: Real>(w: &KernelWeights<T>, spatial_dims: (usize, usize)) -> Result<OrthoConvOperator<T>> {
    cayley_orthogonalize_with(w, spatial_dims, cayley_square)
}

/// [`cayley_orthogonalize`] with a caller-supplied square transform.
pub fn cayley_orthogonalize_with<T: Real>(
    w: &KernelWeights<T>,
    spatial_dims: (usize, usize),
    cayley: CayleyFn<T>,
) -> Result<OrthoConvOperator<T>> {
    let (h, wd) = spatial_dims;
    if w.k() > h.min(wd) {
        return Err(Error::InvalidShape(format!(
            "kernel size {} exceeds grid {h}x{wd}",
            w.k()
        )));
    }
    let plan = Fft2::new(h, wd)?;
    let half = HalfSpectrum::new(h, wd);
    let spectrum = kernel_spectrum(&w.values, &plan)?;
    let (c_out, c_in) = (w.c_out(), w.c_in());
    let n = c_out.max(c_in);

    let mut blocks = vec![ComplexMatrix::zeros(c_out, c_in); h * wd];
    let mut cache = vec![None; h * wd];
    for &f in half.representatives() {
        let e = spectrum.block(f).embed(n);
        let mut a = e.sub(&e.conj_transpose())?;
        if half.is_self_conjugate(f) {
            a.entries_mut().iter_mut().for_each(|v| v.im = T::zero());
        }
        let (q, inv) = cayley(&a).map_err(|err| {
            Error::NumericalHealth(format!(
                "Cayley transform failed at frequency {f} of a {h}x{wd} grid ({c_out}x{c_in} channels): {err}; \
                 I + A should be invertible for skew-Hermitian A"
            ))
        })?;
        blocks[f] = q.block(c_out, c_in);
        cache[f] = Some((q, inv));
    }
    spectral::mirror_blocks(&mut blocks, &half);
    Ok(OrthoConvOperator {
        source: w.clone(),
        freq_op: FreqBlockOperator::new(h, wd, blocks)?,
        spatial_dims,
        plan,
        half,
        cache,
    })
}

impl<T: Real> OrthoConvOperator<T> {
    pub fn spatial_dims(&self) -> (usize, usize) {
        self.spatial_dims
    }

    pub fn c_out(&self) -> usize {
        self.source.c_out()
    }

    pub fn c_in(&self) -> usize {
        self.source.c_in()
    }

    /// Applies the operator without recording a tape.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ortho_conv_forward(self, x)?.0)
    }

    /// Input gradient plus the gradient with respect to the blocks `Q[f]`.
    pub(crate) fn backward_blocks(&self, x_hat: SpectralBatch<T>, grad_y: &Tensor<T>) -> Result<(Tensor<T>, LayerGrad<T>)> {
        let g_hat = SpectralBatch::forward(grad_y, &self.plan)?;
        if g_hat.batch != x_hat.batch || g_hat.channels != self.c_out() {
            return Err(Error::ShapeMismatch {
                expected: vec![x_hat.batch, self.c_out(), self.spatial_dims.0, self.spatial_dims.1],
                found: grad_y.shape().to_vec(),
            });
        }
        let grad_x = self
            .freq_op
            .apply_adjoint_spectral(&g_hat, &self.half)?
            .inverse_real(&self.plan);
        let blocks = spectral::block_gradient(&x_hat, &g_hat, &self.half);
        Ok((grad_x, LayerGrad::Spectral { blocks, bias: None }))
    }

    /// Chains a gradient with respect to `Q[f]` back to the kernel taps:
    /// through `dQ = -(I + Q) dA (I + A)⁻¹`, then `A = Ŵ - Ŵᴴ`, then the FFT
    /// of the padded kernel.
    pub fn weight_gradient(&self, grad_q: &[ComplexMatrix<T>]) -> Result<Tensor<T>> {
        let (c_out, c_in) = (self.c_out(), self.c_in());
        let n = c_out.max(c_in);
        let id = ComplexMatrix::identity(n);
        let mut grad_w_hat = vec![ComplexMatrix::zeros(c_out, c_in); self.freq_op.freq_count()];
        for &f in self.half.representatives() {
            let (q, inv) = self.cache[f]
                .as_ref()
                .expect("every representative frequency is cached");
            let g = grad_q[f].embed(n);
            let lhs = id.add(q)?.conj_transpose();
            let ga = lhs
                .matmul(&g)?
                .matmul(&inv.conj_transpose())?
                .scale(Complex::new(-T::one(), T::zero()));
            grad_w_hat[f] = ga.sub(&ga.conj_transpose())?.block(c_out, c_in);
        }
        spectral::mirror_blocks(&mut grad_w_hat, &self.half);
        Ok(spectral::kernel_gradient(&grad_w_hat, self.source.values.shape(), &self.plan))
    }

    /// Largest deviation of `QᴴQ` (or `QQᴴ` when `c_out < c_in`) from the identity.
    pub fn orthogonality_error(&self) -> Result<T> {
        let mut worst = T::zero();
        for q in self.freq_op.blocks() {
            let gram = if q.rows() >= q.cols() {
                q.conj_transpose().matmul(q)?
            } else {
                q.matmul(&q.conj_transpose())?
            };
            worst = worst.max(gram.max_abs_diff(&ComplexMatrix::identity(gram.rows())));
        }
        Ok(worst)
    }
}

/// `y[f] = Q[f] x̂[f]`, inverse FFT, real part.
pub fn ortho_conv_forward<T: Real>(op: &OrthoConvOperator<T>, x: &Tensor<T>) -> Result<(Tensor<T>, LayerTape<T>)> {
    let x_hat = SpectralBatch::forward(x, &op.plan)?;
    if x_hat.channels != op.c_in() {
        return Err(Error::ShapeMismatch {
            expected: vec![x_hat.batch, op.c_in(), op.spatial_dims.0, op.spatial_dims.1],
            found: x.shape().to_vec(),
        });
    }
    let y = op.freq_op.apply_spectral(&x_hat, &op.half)?.inverse_real(&op.plan);
    Ok((y, LayerTape::OrthoConv { x_hat }))
}

/// Returns `(∂L/∂x, ∂L/∂w)` for the kernel weights of `op`.
pub fn ortho_conv_backward<T: Real>(
    op: &OrthoConvOperator<T>,
    tape: LayerTape<T>,
    grad_y: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let LayerTape::OrthoConv { x_hat } = tape else {
        return Err(Error::InvalidConfig("tape does not belong to an ortho_conv layer".into()));
    };
    let (grad_x, grad) = op.backward_blocks(x_hat, grad_y)?;
    let LayerGrad::Spectral { blocks, .. } = grad else {
        unreachable!("ortho backward yields spectral gradients")
    };
    Ok((grad_x, op.weight_gradient(&blocks)?))
}

/// Layer wrapper that keeps the operator in sync with its kernel.
#[derive(Clone, Debug)]
pub struct OrthoConv<T: Real> {
    op: OrthoConvOperator<T>,
}

impl<T: Real> OrthoConv<T> {
    pub fn new(weights: KernelWeights<T>, spatial_dims: (usize, usize)) -> Result<Self> {
        Ok(Self {
            op: cayley_orthogonalize(&weights, spatial_dims)?,
        })
    }

    pub fn init(c_out: usize, c_in: usize, k: usize, spatial_dims: (usize, usize), rng: &mut Rng) -> Result<Self> {
        Self::new(KernelWeights::gaussian(c_out, c_in, k, ORTHO_INIT_STD, rng), spatial_dims)
    }

    pub fn operator(&self) -> &OrthoConvOperator<T> {
        &self.op
    }

    pub fn weights(&self) -> &KernelWeights<T> {
        &self.op.source
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.op.source.values
    }

    pub fn refresh(&mut self) -> Result<()> {
        let weights = KernelWeights::new(self.op.source.values.clone())?;
        self.op = cayley_orthogonalize(&weights, self.op.spatial_dims)?;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Result<OrthoConv<U>> {
        OrthoConv::new(
            KernelWeights {
                values: self.op.source.values.cast(),
            },
            self.op.spatial_dims,
        )
    }
}
