use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::rng::Rng;

use super::{LayerGrad, LayerTape};

/// Fully connected layer `y = W x + b` on flattened samples.
#[derive(Clone, Debug)]
pub struct Dense<T: Real> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Real> Dense<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let &[out, _] = weight.shape() else {
            return Err(Error::InvalidShape(format!("dense weight must be 2-D, got {:?}", weight.shape())));
        };
        bias.ensure_shape(&[out])?;
        Ok(Self { weight, bias })
    }

    /// LeCun-normal weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("finite std");
        Self {
            weight: Tensor::from_fn(&[outputs, inputs], |_| T::lit(normal.sample(rng))),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerTape<T>)> {
        let (n_in, n_out) = (self.inputs(), self.outputs());
        if x.sample_len() != n_in || x.ndim() < 2 {
            return Err(Error::ShapeMismatch {
                expected: vec![x.batch(), n_in],
                found: x.shape().to_vec(),
            });
        }
        let batch = x.batch();
        let mut y = Tensor::zeros(&[batch, n_out]);
        let w = self.weight.data();
        for b in 0..batch {
            let xs = x.sample(b);
            let ys = y.sample_mut(b);
            for (o, slot) in ys.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *slot = row.iter().zip(xs).fold(self.bias.data()[o], |acc, (&a, &v)| acc + a * v);
            }
        }
        let flat = x.clone().reshape(&[batch, n_in])?;
        Ok((
            y,
            LayerTape::Dense {
                x: flat,
                input_shape: x.shape().to_vec(),
            },
        ))
    }

    pub fn backward(&self, tape: LayerTape<T>, grad_y: &Tensor<T>) -> Result<(Tensor<T>, LayerGrad<T>)> {
        let LayerTape::Dense { x, input_shape } = tape else {
            return Err(Error::InvalidConfig("tape does not belong to a dense layer".into()));
        };
        let (n_in, n_out) = (self.inputs(), self.outputs());
        let batch = x.batch();
        grad_y.ensure_shape(&[batch, n_out])?;
        let w = self.weight.data();
        let mut grad_x = Tensor::zeros(&[batch, n_in]);
        let mut grad_w = Tensor::zeros(&[n_out, n_in]);
        let mut grad_b = Tensor::zeros(&[n_out]);
        for b in 0..batch {
            let g = grad_y.sample(b);
            let xs = x.sample(b);
            for (o, &go) in g.iter().enumerate() {
                grad_b.data_mut()[o] = grad_b.data()[o] + go;
                let row = &w[o * n_in..(o + 1) * n_in];
                for (gx, &wv) in grad_x.sample_mut(b).iter_mut().zip(row) {
                    *gx = *gx + go * wv;
                }
                let grow = &mut grad_w.data_mut()[o * n_in..(o + 1) * n_in];
                for (gw, &xv) in grow.iter_mut().zip(xs) {
                    *gw = *gw + go * xv;
                }
            }
        }
        Ok((grad_x.reshape(&input_shape)?, LayerGrad::Params(vec![grad_w, grad_b])))
    }

    pub fn cast<U: Real>(&self) -> Dense<U> {
        Dense {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}
