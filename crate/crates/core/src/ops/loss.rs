use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

fn check<T: Element>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<(usize, usize)> {
    if probs.rank() != 2 || probs.shape() != onehot.shape() {
        return Err(Error::shape("categorical_crossentropy", probs.shape(), onehot.shape()));
    }
    Ok((probs.shape()[0], probs.shape()[1]))
}

/// Mean over the batch of `-Σ onehot · log(clamp(p))`.
pub fn categorical_crossentropy<T: Element>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<T> {
    let (n, _) = check(probs, onehot)?;
    if n == 0 {
        return Err(Error::invalid("categorical_crossentropy", "empty batch"));
    }
    let lo = T::from_f64_lossy(PROB_CLAMP);
    let hi = T::one() - lo;
    let total: T = probs
        .data()
        .iter()
        .zip(onehot.data())
        .filter(|(_, &t)| t != T::zero())
        .map(|(&p, &t)| -t * p.max(lo).min(hi).ln())
        .sum();
    Ok(total / T::from_usize(n).unwrap())
}

/// Gradient with respect to `probs`; zero where the clamp is active.
pub fn categorical_crossentropy_backward<T: Element>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
    grad_loss: T,
) -> Result<Tensor<T>> {
    let (n, _) = check(probs, onehot)?;
    let lo = T::from_f64_lossy(PROB_CLAMP);
    let hi = T::one() - lo;
    let scale = grad_loss / T::from_usize(n.max(1)).unwrap();
    let data = probs
        .data()
        .iter()
        .zip(onehot.data())
        .map(|(&p, &t)| {
            if t == T::zero() || p < lo || p > hi {
                T::zero()
            } else {
                -t * scale / p
            }
        })
        .collect();
    Tensor::new(probs.shape().to_vec(), data)
}
