use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

use super::LayerTape;

/// Non-overlapping `factor × factor` average pooling on `[B, C, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvgPool {
    pub factor: usize,
}

impl AvgPool {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidConfig("pooling factor must be positive".into()));
        }
        Ok(Self { factor })
    }

    pub fn output_dims(&self, (h, w): (usize, usize)) -> Result<(usize, usize)> {
        for size in [h, w] {
            if size % self.factor != 0 {
                return Err(Error::IndivisibleShape { size, factor: self.factor });
            }
        }
        Ok((h / self.factor, w / self.factor))
    }

    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerTape<T>)> {
        let &[b, c, h, w] = x.shape() else {
            return Err(Error::InvalidShape(format!("avg_pool expects [B, C, H, W], got {:?}", x.shape())));
        };
        let (oh, ow) = self.output_dims((h, w))?;
        let f = self.factor;
        let scale = T::lit(1.0 / (f * f) as f64);
        let mut y = Tensor::zeros(&[b, c, oh, ow]);
        let (src, dst) = (x.data(), y.data_mut());
        for plane in 0..b * c {
            let xin = &src[plane * h * w..(plane + 1) * h * w];
            let out = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
            for r in 0..h {
                for s in 0..w {
                    let slot = &mut out[(r / f) * ow + s / f];
                    *slot = *slot + xin[r * w + s];
                }
            }
            out.iter_mut().for_each(|v| *v = *v * scale);
        }
        Ok((
            y,
            LayerTape::AvgPool {
                input_shape: x.shape().to_vec(),
            },
        ))
    }

    pub fn backward<T: Real>(&self, tape: LayerTape<T>, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
        let LayerTape::AvgPool { input_shape } = tape else {
            return Err(Error::InvalidConfig("tape does not belong to an avg_pool layer".into()));
        };
        let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let f = self.factor;
        let (oh, ow) = (h / f, w / f);
        grad_y.ensure_shape(&[b, c, oh, ow])?;
        let scale = T::lit(1.0 / (f * f) as f64);
        let g = grad_y.data();
        Ok(Tensor::from_fn(&input_shape, |idx| {
            let plane = idx / (h * w);
            let (r, s) = ((idx % (h * w)) / w, idx % w);
            g[plane * oh * ow + (r / f) * ow + s / f] * scale
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_averages_to_half() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| ((i / 4 + i % 4) % 2) as f64);
        let (y, _) = AvgPool::new(2).unwrap().forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn backward_is_adjoint() {
        let pool = AvgPool::new(2).unwrap();
        let x = Tensor::from_fn(&[2, 3, 4, 6], |i| (i as f64 * 0.37).sin());
        let g = Tensor::from_fn(&[2, 3, 2, 3], |i| (i as f64 * 1.3).cos());
        let (y, tape) = pool.forward(&x).unwrap();
        let gx = pool.backward(tape, &g).unwrap();
        assert!((y.dot(&g).unwrap() - x.dot(&gx).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 5, 4]);
        assert!(matches!(
            AvgPool::new(2).unwrap().forward(&x),
            Err(Error::IndivisibleShape { size: 5, factor: 2 })
        ));
    }
}
