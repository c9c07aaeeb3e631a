use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::conv::{conv_transpose_direct, conv_weight_grad_direct};
use crate::numerics::{
    circular_conv_direct, kernel_spectrum, spectral, ComplexMatrix, Fft2, FreqBlockOperator, HalfSpectrum, Real,
    SpectralBatch, Tensor,
};
use crate::rng::Rng;

use super::{KernelWeights, LayerGrad, LayerTape};

/// How a plain convolution is evaluated. Both paths compute the same map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvPath {
    Direct,
    Spectral,
}

impl ConvPath {
    /// Rough multiply-add count comparison for one sample.
    pub fn cheapest(c_out: usize, c_in: usize, k: usize, (h, w): (usize, usize)) -> Self {
        let plane = (h * w) as f64;
        let direct = (c_out * c_in * k * k) as f64 * plane;
        let log = (h as f64).log2() + (w as f64).log2() + 2.0;
        let spectral = (c_out * c_in) as f64 * plane * 2.0 + (c_out + c_in) as f64 * plane * log * 3.0;
        if direct <= spectral {
            ConvPath::Direct
        } else {
            ConvPath::Spectral
        }
    }
}

#[derive(Clone, Debug)]
struct SpectralState<T: Real> {
    plan: Fft2<T>,
    half: HalfSpectrum,
    op: FreqBlockOperator<T>,
}

/// Unconstrained circular convolution with optional per-channel bias.
#[derive(Clone, Debug)]
pub struct PlainConv<T: Real> {
    pub weights: KernelWeights<T>,
    pub bias: Option<Tensor<T>>,
    spatial_dims: (usize, usize),
    path: ConvPath,
    spectral: Option<SpectralState<T>>,
}

impl<T: Real> PlainConv<T> {
    pub fn new(weights: KernelWeights<T>, bias: Option<Tensor<T>>, spatial_dims: (usize, usize)) -> Result<Self> {
        let path = ConvPath::cheapest(weights.c_out(), weights.c_in(), weights.k(), spatial_dims);
        Self::with_path(weights, bias, spatial_dims, path)
    }

    pub fn with_path(
        weights: KernelWeights<T>,
        bias: Option<Tensor<T>>,
        spatial_dims: (usize, usize),
        path: ConvPath,
    ) -> Result<Self> {
        if let Some(b) = &bias {
            b.ensure_shape(&[weights.c_out()])?;
        }
        if weights.k() > spatial_dims.0.min(spatial_dims.1) {
            return Err(Error::InvalidShape(format!(
                "kernel size {} exceeds grid {spatial_dims:?}",
                weights.k()
            )));
        }
        let mut conv = Self {
            weights,
            bias,
            spatial_dims,
            path,
            spectral: None,
        };
        conv.refresh()?;
        Ok(conv)
    }

    /// He-normal kernel, zero bias.
    pub fn init(c_out: usize, c_in: usize, k: usize, spatial_dims: (usize, usize), bias: bool, rng: &mut Rng) -> Result<Self> {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let weights = KernelWeights::gaussian(c_out, c_in, k, std, rng);
        let bias = bias.then(|| Tensor::zeros(&[c_out]));
        Self::new(weights, bias, spatial_dims)
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        self.spatial_dims
    }

    pub fn path(&self) -> ConvPath {
        self.path
    }

    pub fn refresh(&mut self) -> Result<()> {
        self.spectral = match self.path {
            ConvPath::Direct => None,
            ConvPath::Spectral => {
                let plan = Fft2::new(self.spatial_dims.0, self.spatial_dims.1)?;
                let op = kernel_spectrum(&self.weights.values, &plan)?;
                Some(SpectralState {
                    half: HalfSpectrum::new(self.spatial_dims.0, self.spatial_dims.1),
                    plan,
                    op,
                })
            }
        };
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.weights.values];
        out.extend(self.bias.as_ref());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.weights.values];
        out.extend(self.bias.as_mut());
        out
    }

    fn add_bias(&self, y: &mut Tensor<T>) {
        let Some(bias) = &self.bias else { return };
        let plane = self.spatial_dims.0 * self.spatial_dims.1;
        let c_out = self.weights.c_out();
        for (idx, chunk) in y.data_mut().chunks_exact_mut(plane).enumerate() {
            let b = bias.data()[idx % c_out];
            chunk.iter_mut().for_each(|v| *v = *v + b);
        }
    }

    fn bias_gradient(&self, g: &Tensor<T>) -> Option<Tensor<T>> {
        self.bias.as_ref()?;
        let plane = self.spatial_dims.0 * self.spatial_dims.1;
        let c_out = self.weights.c_out();
        let mut grad = Tensor::zeros(&[c_out]);
        for (idx, chunk) in g.data().chunks_exact(plane).enumerate() {
            let slot = &mut grad.data_mut()[idx % c_out];
            *slot = *slot + chunk.iter().copied().sum::<T>();
        }
        Some(grad)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerTape<T>)> {
        let (mut y, tape) = match &self.spectral {
            None => (
                circular_conv_direct(x, &self.weights.values)?,
                LayerTape::DirectConv { x: x.clone() },
            ),
            Some(state) => {
                let x_hat = SpectralBatch::forward(x, &state.plan)?;
                let y = state.op.apply_spectral(&x_hat, &state.half)?.inverse_real(&state.plan);
                (y, LayerTape::SpectralConv { x_hat })
            }
        };
        self.add_bias(&mut y);
        Ok((y, tape))
    }

    pub fn backward(&self, tape: LayerTape<T>, grad_y: &Tensor<T>) -> Result<(Tensor<T>, LayerGrad<T>)> {
        let bias = self.bias_gradient(grad_y);
        match (tape, &self.spectral) {
            (LayerTape::DirectConv { x }, None) => {
                let grad_x = conv_transpose_direct(grad_y, &self.weights.values)?;
                let mut grads = vec![conv_weight_grad_direct(&x, grad_y, self.weights.values.shape())];
                grads.extend(bias);
                Ok((grad_x, LayerGrad::Params(grads)))
            }
            (LayerTape::SpectralConv { x_hat }, Some(state)) => {
                let g_hat = SpectralBatch::forward(grad_y, &state.plan)?;
                let grad_x = state.op.apply_adjoint_spectral(&g_hat, &state.half)?.inverse_real(&state.plan);
                let blocks = spectral::block_gradient(&x_hat, &g_hat, &state.half);
                Ok((grad_x, LayerGrad::Spectral { blocks, bias }))
            }
            _ => Err(Error::InvalidConfig("tape does not belong to this plain_conv layer".into())),
        }
    }

    pub(crate) fn spectral_param_gradients(&self, blocks: &[ComplexMatrix<T>], bias: Option<Tensor<T>>) -> Result<Vec<Tensor<T>>> {
        let state = self
            .spectral
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("spectral gradient for a direct-path convolution".into()))?;
        let mut out = vec![spectral::kernel_gradient(blocks, self.weights.values.shape(), &state.plan)];
        if self.bias.is_some() {
            out.push(bias.unwrap_or_else(|| Tensor::zeros(&[self.weights.c_out()])));
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Result<PlainConv<U>> {
        PlainConv::with_path(
            KernelWeights {
                values: self.weights.values.cast(),
            },
            self.bias.as_ref().map(Tensor::cast),
            self.spatial_dims,
            self.path,
        )
    }
}
