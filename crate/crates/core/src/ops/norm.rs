use crate::error::{Error, Result};
use super::GradPair;
use crate::tensor::{Element, Tensor};

pub const DEFAULT_BN_EPS: f64 = 1e-3;

fn check_params<T: Element>(
    x: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
) -> Result<usize> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("batchnorm", "scalar input"))?;
    for p in [beta, mean, var] {
        if p.shape() != [c] {
            return Err(Error::shape("batchnorm", x.shape(), p.shape()));
        }
    }
    if let Some(v) = var.data().iter().find(|v| v.is_nan() || **v < T::zero()) {
        return Err(Error::invalid(
            "batchnorm",
            format!("moving variance must be non-negative, got {v}"),
        ));
    }
    Ok(c)
}

fn inv_std<T: Element>(var: &Tensor<T>, eps: T) -> Vec<T> {
    var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
}

/// Inference-mode batch normalization with a shift but no scale:
/// `y = (x - mean) / sqrt(var + eps) + beta` per channel (last axis).
pub fn batchnorm<T: Element>(
    x: &Tensor<T>,
    beta: &Tensor<T>,
    moving_mean: &Tensor<T>,
    moving_var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let c = check_params(x, beta, moving_mean, moving_var)?;
    let inv = inv_std(moving_var, eps);
    let (b, m) = (beta.data(), moving_mean.data());
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (ch, v) in row.iter_mut().enumerate() {
            *v = (*v - m[ch]) * inv[ch] + b[ch];
        }
    }
    Ok(out)
}

/// Returns `(d_input, d_beta)`. Moving statistics are frozen and get no gradient.
pub fn batchnorm_backward<T: Element>(
    grad_out: &Tensor<T>,
    moving_var: &Tensor<T>,
    eps: T,
    need_input: bool,
    need_beta: bool,
) -> Result<GradPair<T>> {
    let c = moving_var.len();
    if grad_out.shape().last() != Some(&c) {
        return Err(Error::shape("batchnorm_backward", grad_out.shape(), moving_var.shape()));
    }
    let dx = need_input.then(|| {
        let inv = inv_std(moving_var, eps);
        let mut dx = grad_out.clone();
        for row in dx.data_mut().chunks_mut(c) {
            for (v, &s) in row.iter_mut().zip(&inv) {
                *v = *v * s;
            }
        }
        dx
    });
    let dbeta = need_beta.then(|| {
        let mut acc = vec![T::zero(); c];
        for row in grad_out.data().chunks(c) {
            for (a, &g) in acc.iter_mut().zip(row) {
                *a = *a + g;
            }
        }
        Tensor::new(vec![c], acc).expect("beta gradient shape")
    });
    Ok((dx, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec1(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn hand_arithmetic() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = batchnorm(&x, &vec1(0.5), &vec1(1.0), &vec1(4.0), 0.0).unwrap();
        assert_eq!(y.data(), [1.0]);
    }

    #[test]
    fn unit_stats_are_identity() {
        let x = Tensor::from_fn(&[2, 3, 3, 1], |i| i as f64 * 0.25 - 1.0);
        let y = batchnorm(&x, &vec1(0.0), &vec1(0.0), &vec1(1.0), 0.0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_elementwise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 4;
        let x: Tensor<f64> = Tensor::from_fn(&[2, 3, 2, c], |_| rng.random_range(-3.0..3.0));
        let beta: Tensor<f64> = Tensor::from_fn(&[c], |_| rng.random_range(-1.0..1.0));
        let mean: Tensor<f64> = Tensor::from_fn(&[c], |_| rng.random_range(-1.0..1.0));
        let var: Tensor<f64> = Tensor::from_fn(&[c], |_| rng.random_range(0.1..2.0));
        let eps = 1e-3f64;
        let y = batchnorm(&x, &beta, &mean, &var, eps).unwrap();
        for (i, (&xv, &yv)) in x.data().iter().zip(y.data()).enumerate() {
            let ch = i % c;
            let want = (xv - mean.data()[ch]) / (var.data()[ch] + eps).sqrt() + beta.data()[ch];
            assert!((yv - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_negative_variance() {
        let x = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        let err = batchnorm(&x, &vec1(0.0), &vec1(0.0), &vec1(-1.0), 1e-3).unwrap_err();
        assert!(err.to_string().contains("non-negative"));
    }
}
