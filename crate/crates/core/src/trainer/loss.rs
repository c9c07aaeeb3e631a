use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let &[n, c] = logits.shape() else {
        return Err(Error::InvalidShape(format!("logits must be [N, C], got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n],
            found: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidConfig(format!("label {bad} out of range for {c} classes")));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut grad = Tensor::zeros(&[n, c]);
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.sample(i);
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        total = total + (lse - row[y]);
        let g = grad.sample_mut(i);
        for (j, (&v, gj)) in row.iter().zip(g.iter_mut()).enumerate() {
            let p = (v - lse).exp();
            *gj = (p - if j == y { T::one() } else { T::zero() }) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

/// Index of the largest logit per row.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.batch())
        .map(|i| {
            let row = logits.sample(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
