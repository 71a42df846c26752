use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-element multiplier applied by a training-mode dropout pass:
/// `0` for dropped elements and `1 / (1 - rate)` for survivors.
#[derive(Clone, Debug)]
pub struct DropoutMask<T: Element>(pub Vec<T>);

/// Inverted dropout. With `training == false` (or `rate == 0`) the input is
/// returned unchanged and no mask is produced.
pub fn dropout<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<DropoutMask<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(
            "dropout",
            format!("rate must lie in [0, 1), got {rate}"),
        ));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::new(x.shape().to_vec(), data)?, Some(DropoutMask(mask))))
}

pub fn dropout_backward<T: Element>(
    grad_out: &Tensor<T>,
    mask: Option<&DropoutMask<T>>,
) -> Result<Tensor<T>> {
    match mask {
        None => Ok(grad_out.clone()),
        Some(DropoutMask(m)) => {
            if m.len() != grad_out.len() {
                return Err(Error::shape("dropout_backward", grad_out.shape(), &[m.len()]));
            }
            let data = grad_out.data().iter().zip(m).map(|(&g, &k)| g * k).collect();
            Tensor::new(grad_out.shape().to_vec(), data)
        }
    }
}
