use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of relu given the forward output; the subgradient at 0 is 0.
pub fn relu_backward<T: Element>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::shape("relu_backward", output.shape(), grad_out.shape()));
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

/// Softmax over the last axis with max subtraction.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = *x
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("softmax", "scalar input"))?;
    let mut out = x.clone();
    if cols == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

/// `dx = y ⊙ (g − Σ g ⊙ y)` per row.
pub fn softmax_backward<T: Element>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::shape("softmax_backward", output.shape(), grad_out.shape()));
    }
    let cols = output.shape().last().copied().unwrap_or(1).max(1);
    let mut dx = Vec::with_capacity(output.len());
    for (y, g) in output.data().chunks(cols).zip(grad_out.data().chunks(cols)) {
        let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
        dx.extend(y.iter().zip(g).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::new(output.shape().to_vec(), dx)
}
