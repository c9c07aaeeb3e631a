//! Differentiable layers with hand-written backward passes.
//!
//! A forward call returns the output together with a [`LayerTape`] holding
//! whatever the backward pass needs. Backward consumes the tape and returns
//! the input gradient plus a [`LayerGrad`]. Convolution gradients stay in
//! the Fourier domain until [`Layer::param_gradients`] maps them back to
//! kernel taps, so a layer evaluated many times inside an ODE solve pays
//! for that mapping once.

mod activation;
mod conv;
mod dense;
mod ortho;
mod pool;
pub mod serialize;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::numerics::{ComplexMatrix, Real, SpectralBatch, Tensor};
use crate::rng::Rng;

pub use activation::{groupsort_backward, groupsort_forward, relu_backward, relu_forward};
pub use conv::{ConvPath, PlainConv};
pub use dense::Dense;
pub use ortho::{
    cayley_orthogonalize, cayley_orthogonalize_with, cayley_square, ortho_conv_backward, ortho_conv_forward,
    CayleyFn, OrthoConv, OrthoConvOperator,
};
pub use pool::AvgPool;

/// Standard deviation of the i.i.d. Gaussian initialization of orthogonal
/// convolution kernels.
pub const ORTHO_INIT_STD: f64 = 0.05;

/// Convolution weights `[c_out, c_in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelWeights<T> {
    pub values: Tensor<T>,
}

impl<T: Real> KernelWeights<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        match *values.shape() {
            [_, _, kh, kw] if kh == kw && kh > 0 => {}
            ref other => {
                return Err(Error::InvalidShape(format!(
                    "kernel weights must be [c_out, c_in, k, k], got {other:?}"
                )))
            }
        }
        if !values.is_finite() {
            return Err(Error::NumericalHealth("kernel weights contain non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        Self {
            values: Tensor::zeros(&[c_out, c_in, k, k]),
        }
    }

    pub fn gaussian(c_out: usize, c_in: usize, k: usize, std: f64, rng: &mut Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            values: Tensor::from_fn(&[c_out, c_in, k, k], |_| T::lit(normal.sample(rng))),
        }
    }

    pub fn c_out(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Forward intermediates, one variant per layer kind.
#[derive(Debug)]
pub enum LayerTape<T> {
    SpectralConv { x_hat: SpectralBatch<T> },
    DirectConv { x: Tensor<T> },
    OrthoConv { x_hat: SpectralBatch<T> },
    Dense { x: Tensor<T>, input_shape: Vec<usize> },
    Relu { x: Tensor<T> },
    GroupSort { swapped: Vec<bool>, shape: Vec<usize> },
    AvgPool { input_shape: Vec<usize> },
}

/// Parameter gradient as produced by a single backward call.
#[derive(Clone, Debug)]
pub enum LayerGrad<T> {
    /// Layer has no parameters.
    None,
    /// Already in parameter space, in [`Layer::params`] order.
    Params(Vec<Tensor<T>>),
    /// Gradient with respect to the per-frequency blocks (`Re⟨G, dB⟩`
    /// convention) plus an optional bias gradient.
    Spectral {
        blocks: Vec<ComplexMatrix<T>>,
        bias: Option<Tensor<T>>,
    },
}

impl<T: Real> LayerGrad<T> {
    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: LayerGrad<T>) -> Result<()> {
        match (&mut *self, other) {
            (_, LayerGrad::None) => {}
            (LayerGrad::None, other) => *self = other,
            (LayerGrad::Params(acc), LayerGrad::Params(new)) => {
                for (a, b) in acc.iter_mut().zip(&new) {
                    a.add_assign(b)?;
                }
            }
            (
                LayerGrad::Spectral { blocks, bias },
                LayerGrad::Spectral {
                    blocks: new_blocks,
                    bias: new_bias,
                },
            ) => {
                for (a, b) in blocks.iter_mut().zip(&new_blocks) {
                    for (x, &y) in a.entries_mut().iter_mut().zip(b.entries()) {
                        *x = *x + y;
                    }
                }
                if let (Some(a), Some(b)) = (bias.as_mut(), new_bias.as_ref()) {
                    a.add_assign(b)?;
                }
            }
            _ => return Err(Error::InvalidConfig("accumulating gradients of different kinds".into())),
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        match self {
            LayerGrad::None => {}
            LayerGrad::Params(ts) => ts.iter_mut().for_each(|t| *t = t.scale(factor)),
            LayerGrad::Spectral { blocks, bias } => {
                let c = Complex::new(factor, T::zero());
                blocks.iter_mut().for_each(|b| *b = b.scale(c));
                if let Some(b) = bias {
                    *b = b.scale(factor);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T: Real> {
    PlainConv(PlainConv<T>),
    OrthoConv(OrthoConv<T>),
    Dense(Dense<T>),
    Relu,
    GroupSort,
    AvgPool(AvgPool),
}

fn tape_mismatch(kind: &str) -> Error {
    Error::InvalidConfig(format!("tape does not belong to a {kind} layer"))
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::PlainConv(_) => "plain_conv",
            Layer::OrthoConv(_) => "ortho_conv",
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::GroupSort => "groupsort",
            Layer::AvgPool(_) => "avg_pool",
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerTape<T>)> {
        match self {
            Layer::PlainConv(c) => c.forward(x),
            Layer::OrthoConv(c) => ortho_conv_forward(c.operator(), x),
            Layer::Dense(d) => d.forward(x),
            Layer::Relu => relu_forward(x),
            Layer::GroupSort => groupsort_forward(x),
            Layer::AvgPool(p) => p.forward(x),
        }
    }

    pub fn backward(&self, tape: LayerTape<T>, grad_y: &Tensor<T>) -> Result<(Tensor<T>, LayerGrad<T>)> {
        match (self, tape) {
            (Layer::PlainConv(c), tape) => c.backward(tape, grad_y),
            (Layer::OrthoConv(c), LayerTape::OrthoConv { x_hat }) => c.operator().backward_blocks(x_hat, grad_y),
            (Layer::Dense(d), tape) => d.backward(tape, grad_y),
            (Layer::Relu, tape) => Ok((relu_backward(tape, grad_y)?, LayerGrad::None)),
            (Layer::GroupSort, tape) => Ok((groupsort_backward(tape, grad_y)?, LayerGrad::None)),
            (Layer::AvgPool(p), tape) => Ok((p.backward(tape, grad_y)?, LayerGrad::None)),
            (layer, _) => Err(tape_mismatch(layer.kind())),
        }
    }

    /// Maps an accumulated [`LayerGrad`] onto parameter tensors, in
    /// [`Layer::params`] order.
    pub fn param_gradients(&self, grad: LayerGrad<T>) -> Result<Vec<Tensor<T>>> {
        match (self, grad) {
            (_, LayerGrad::Params(ts)) => Ok(ts),
            (layer, LayerGrad::None) => Ok(layer.params().iter().map(|p| Tensor::zeros(p.shape())).collect()),
            (Layer::PlainConv(c), LayerGrad::Spectral { blocks, bias }) => c.spectral_param_gradients(&blocks, bias),
            (Layer::OrthoConv(c), LayerGrad::Spectral { blocks, .. }) => Ok(vec![c.operator().weight_gradient(&blocks)?]),
            (layer, _) => Err(Error::InvalidConfig(format!(
                "spectral gradient for a {} layer",
                layer.kind()
            ))),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::PlainConv(c) => c.params(),
            Layer::OrthoConv(c) => vec![&c.operator().source.values],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => Vec::new(),
        }
    }

    /// Mutable parameter access. Call [`Layer::refresh`] after modifying.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::PlainConv(c) => c.params_mut(),
            Layer::OrthoConv(c) => vec![c.weights_mut()],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => Vec::new(),
        }
    }

    /// Recomputes operators derived from the parameters.
    pub fn refresh(&mut self) -> Result<()> {
        match self {
            Layer::PlainConv(c) => c.refresh(),
            Layer::OrthoConv(c) => c.refresh(),
            _ => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Result<Layer<U>> {
        Ok(match self {
            Layer::PlainConv(c) => Layer::PlainConv(c.cast()?),
            Layer::OrthoConv(c) => Layer::OrthoConv(c.cast()?),
            Layer::Dense(d) => Layer::Dense(d.cast()),
            Layer::Relu => Layer::Relu,
            Layer::GroupSort => Layer::GroupSort,
            Layer::AvgPool(p) => Layer::AvgPool(*p),
        })
    }
}

/// Runs a stack of layers, keeping every tape.
pub fn forward_stack<T: Real>(layers: &[Layer<T>], x: &Tensor<T>) -> Result<(Tensor<T>, Vec<LayerTape<T>>)> {
    let mut tapes = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers {
        let (y, tape) = layer.forward(&cur)?;
        tapes.push(tape);
        cur = y;
    }
    Ok((cur, tapes))
}

/// Runs a stack of layers without keeping tapes.
pub fn infer_stack<T: Real>(layers: &[Layer<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut cur = x.clone();
    for layer in layers {
        cur = layer.forward(&cur)?.0;
    }
    Ok(cur)
}

/// Backpropagates through a stack, consuming its tapes. Parameter
/// gradients are accumulated into `grads` (one entry per layer).
pub fn backward_stack<T: Real>(
    layers: &[Layer<T>],
    tapes: Vec<LayerTape<T>>,
    grad_y: &Tensor<T>,
    grads: &mut [LayerGrad<T>],
) -> Result<Tensor<T>> {
    if tapes.len() != layers.len() || grads.len() != layers.len() {
        return Err(Error::InvalidConfig("tape count does not match layer count".into()));
    }
    let mut g = grad_y.clone();
    for ((layer, tape), acc) in layers.iter().zip(tapes).zip(grads.iter_mut()).rev() {
        let (gx, pg) = layer.backward(tape, &g)?;
        acc.accumulate(pg)?;
        g = gx;
    }
    Ok(g)
}
