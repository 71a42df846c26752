use super::{require_rank, GradTriple};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tensor};

/// `y = x · W + b` for `x: [N, D]`, `W: [D, U]`, `b: [U]`.
pub fn dense<T: Element>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    require_rank("dense", x.shape(), 2)?;
    require_rank("dense", weights.shape(), 2)?;
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (wd, u) = (weights.shape()[0], weights.shape()[1]);
    if d != wd {
        return Err(Error::shape("dense", x.shape(), weights.shape()));
    }
    if bias.shape() != [u] {
        return Err(Error::shape("dense", weights.shape(), bias.shape()));
    }
    let mut out = Vec::with_capacity(n * u);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(x.data(), n, d, false, weights.data(), d, u, false, &mut out, true);
    Tensor::new(vec![n, u], out)
}

/// Returns `(d_x, d_weights, d_bias)` for the requested operands.
pub fn dense_backward<T: Element>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_params: bool,
) -> Result<GradTriple<T>> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let u = weights.shape()[1];
    if grad_out.shape() != [n, u] {
        return Err(Error::shape("dense_backward", grad_out.shape(), &[n, u]));
    }
    let g = grad_out.data();
    let dx = if need_input {
        let mut dx = vec![T::zero(); n * d];
        gemm(g, n, u, false, weights.data(), d, u, true, &mut dx, false);
        Some(Tensor::new(vec![n, d], dx)?)
    } else {
        None
    };
    let (dw, db) = if need_params {
        let mut dw = vec![T::zero(); d * u];
        gemm(x.data(), n, d, true, g, n, u, false, &mut dw, false);
        let mut db = vec![T::zero(); u];
        for row in g.chunks(u) {
            for (a, &v) in db.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        (
            Some(Tensor::new(vec![d, u], dw)?),
            Some(Tensor::new(vec![u], db)?),
        )
    } else {
        (None, None)
    };
    Ok((dx, dw, db))
}
