//! Forward and backward kernels for every layer primitive the pipeline uses.
//!
//! Each primitive is a pure function of its inputs. Backward functions take the
//! upstream gradient and whatever the forward pass saved, and return gradients
//! for the requested inputs only.

mod activation;
mod conv;
mod dense;
mod dropout;
mod loss;
mod norm;
mod pool;
mod shape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optional gradients for two operands.
pub type GradPair<T> = (Option<Tensor<T>>, Option<Tensor<T>>);
/// Optional gradients for three operands.
pub type GradTriple<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

pub use activation::{relu, relu_backward, softmax, softmax_backward};
pub use conv::{conv2d, conv2d_backward, Conv2dGeometry};
pub use dense::{dense, dense_backward};
pub use dropout::{dropout, dropout_backward, DropoutMask};
pub use loss::{categorical_crossentropy, categorical_crossentropy_backward, PROB_CLAMP};
pub use norm::{batchnorm, batchnorm_backward, DEFAULT_BN_EPS};
pub use pool::{pool2d, pool2d_backward, PoolMode, PoolOutput};
pub use shape::{concat_channels, flatten, split_channels};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

impl std::fmt::Display for Padding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Padding::Valid => "valid",
            Padding::Same => "same",
        })
    }
}

/// Output extent and leading pad for one spatial axis.
///
/// valid: `floor((input - window) / stride) + 1`; same: `ceil(input / stride)`
/// with the total pad split so the extra cell (if any) goes after.
pub fn output_extent(
    input: usize,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    if window == 0 || stride == 0 || input == 0 {
        return None;
    }
    match padding {
        Padding::Valid => {
            if window > input {
                None
            } else {
                Some(((input - window) / stride + 1, 0))
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = (out - 1) * stride + window;
            let pad_total = needed.saturating_sub(input);
            Some((out, pad_total / 2))
        }
    }
}

pub(crate) fn require_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::invalid(
            op,
            format!("expected rank {rank}, got shape {shape:?}"),
        ));
    }
    Ok(())
}
