use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

use super::LayerTape;

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, LayerTape<T>)> {
    Ok((x.map(|v| v.max(T::zero())), LayerTape::Relu { x: x.clone() }))
}

pub fn relu_backward<T: Real>(tape: LayerTape<T>, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
    let LayerTape::Relu { x } = tape else {
        return Err(Error::InvalidConfig("tape does not belong to a relu layer".into()));
    };
    grad_y.ensure_shape(x.shape())?;
    x.zip_map(grad_y, |v, g| if v > T::zero() { g } else { T::zero() })
}

/// Pair layout: `(stride, pairs)` per outer block. 4-D inputs pair channels
/// `(2j, 2j+1)` at each pixel; anything else pairs adjacent entries of the
/// last axis. An odd trailing channel passes through.
fn pair_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h * w)),
        [] => Err(Error::InvalidShape("groupsort needs at least one axis".into())),
        _ => {
            let last = *shape.last().unwrap();
            let outer = shape[..shape.len() - 1].iter().product();
            Ok((outer, last, 1))
        }
    }
}

/// Sorts each pair ascending (group size 2, i.e. MaxMin).
pub fn groupsort_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, LayerTape<T>)> {
    let (outer, c, inner) = pair_layout(x.shape())?;
    let mut y = x.clone();
    let mut swapped = Vec::with_capacity(outer * (c / 2) * inner);
    let d = y.data_mut();
    for o in 0..outer {
        for j in 0..c / 2 {
            let a0 = (o * c + 2 * j) * inner;
            let b0 = a0 + inner;
            for s in 0..inner {
                let (a, b) = (d[a0 + s], d[b0 + s]);
                let swap = a > b;
                if swap {
                    d[a0 + s] = b;
                    d[b0 + s] = a;
                }
                swapped.push(swap);
            }
        }
    }
    Ok((
        y,
        LayerTape::GroupSort {
            swapped,
            shape: x.shape().to_vec(),
        },
    ))
}

pub fn groupsort_backward<T: Real>(tape: LayerTape<T>, grad_y: &Tensor<T>) -> Result<Tensor<T>> {
    let LayerTape::GroupSort { swapped, shape } = tape else {
        return Err(Error::InvalidConfig("tape does not belong to a groupsort layer".into()));
    };
    grad_y.ensure_shape(&shape)?;
    let (outer, c, inner) = pair_layout(&shape)?;
    let mut g = grad_y.clone();
    let d = g.data_mut();
    let mut flags = swapped.iter();
    for o in 0..outer {
        for j in 0..c / 2 {
            let a0 = (o * c + 2 * j) * inner;
            let b0 = a0 + inner;
            for s in 0..inner {
                if *flags.next().expect("tape length") {
                    d.swap(a0 + s, b0 + s);
                }
            }
        }
    }
    Ok(g)
}
