use super::require_rank;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Concatenate NHWC tensors along the channel axis in argument order.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    require_rank("concat", first.shape(), 4)?;
    let lead = &first.shape()[..3];
    for p in parts {
        require_rank("concat", p.shape(), 4)?;
        if &p.shape()[..3] != lead {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let cells: usize = lead.iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[3]).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(cells * total);
    for cell in 0..cells {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[cell * w..(cell + 1) * w]);
        }
    }
    Tensor::new(vec![lead[0], lead[1], lead[2], total], out)
}

/// Inverse of [`concat_channels`]: slice the channel axis into the given widths.
pub fn split_channels<T: Element>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    require_rank("split_channels", x.shape(), 4)?;
    let c = x.shape()[3];
    if widths.iter().sum::<usize>() != c {
        return Err(Error::shape("split_channels", x.shape(), widths));
    }
    let cells = x.len() / c.max(1);
    let mut parts: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(cells * w)).collect();
    for row in x.data().chunks(c) {
        let mut off = 0;
        for (part, &w) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    let lead = &x.shape()[..3];
    parts
        .into_iter()
        .zip(widths)
        .map(|(data, &w)| Tensor::new(vec![lead[0], lead[1], lead[2], w], data))
        .collect()
}

/// `[N, H, W, C] -> [N, H·W·C]`, keeping NHWC iteration order.
pub fn flatten<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x
        .shape()
        .first()
        .ok_or_else(|| Error::invalid("flatten", "scalar input"))?;
    let rest: usize = x.shape()[1..].iter().product();
    x.clone().reshape(&[n, rest])
}
