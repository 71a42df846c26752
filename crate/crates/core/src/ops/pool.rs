use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{output_extent, require_rank, Padding};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

pub struct PoolOutput<T: Element> {
    pub output: Tensor<T>,
    /// For max pooling, the flat input index each output cell was taken from.
    pub argmax: Option<Vec<usize>>,
}

struct PoolGeometry {
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
    window: usize,
    stride: usize,
}

impl PoolGeometry {
    fn new(shape: &[usize], window: usize, stride: usize, padding: Padding) -> Result<Self> {
        require_rank("pool2d", shape, 4)?;
        if window == 0 || stride == 0 {
            return Err(Error::invalid("pool2d", "window and stride must be positive"));
        }
        let empty = || Error::EmptyOutput {
            op: "pool2d",
            input: shape.to_vec(),
        };
        let (oh, pad_top) = output_extent(shape[1], window, stride, padding).ok_or_else(empty)?;
        let (ow, pad_left) = output_extent(shape[2], window, stride, padding).ok_or_else(empty)?;
        Ok(Self {
            h: shape[1],
            w: shape[2],
            c: shape[3],
            oh,
            ow,
            pad_top,
            pad_left,
            window,
            stride,
        })
    }

    /// In-bounds input range covered by the window at output index `o`.
    fn span(&self, o: usize, pad: usize, extent: usize) -> std::ops::Range<usize> {
        let start = o * self.stride;
        let lo = start.saturating_sub(pad);
        let hi = (start + self.window).saturating_sub(pad).min(extent);
        lo..hi
    }
}

/// Max or average pooling over square windows. Average pooling divides by the
/// number of in-bounds cells, so padding never dilutes the mean.
pub fn pool2d<T: Element>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
    mode: PoolMode,
    padding: Padding,
) -> Result<PoolOutput<T>> {
    let g = PoolGeometry::new(x.shape(), window, stride, padding)?;
    let n = x.shape()[0];
    let (in_img, out_img) = (g.h * g.w * g.c, g.oh * g.ow * g.c);
    let mut out = vec![T::zero(); n * out_img];
    let mut argmax = match mode {
        PoolMode::Max => vec![0usize; n * out_img],
        PoolMode::Avg => Vec::new(),
    };
    let xd = x.data();

    let fill = |b: usize, out: &mut [T], arg: &mut [usize]| {
        let base = b * in_img;
        for oy in 0..g.oh {
            let ys = g.span(oy, g.pad_top, g.h);
            for ox in 0..g.ow {
                let xs = g.span(ox, g.pad_left, g.w);
                let o = (oy * g.ow + ox) * g.c;
                for ch in 0..g.c {
                    match mode {
                        PoolMode::Max => {
                            let mut best_idx = base + (ys.start * g.w + xs.start) * g.c + ch;
                            let mut best = xd[best_idx];
                            for iy in ys.clone() {
                                for ix in xs.clone() {
                                    let idx = base + (iy * g.w + ix) * g.c + ch;
                                    if xd[idx] > best {
                                        best = xd[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out[o + ch] = best;
                            arg[o + ch] = best_idx;
                        }
                        PoolMode::Avg => {
                            let mut acc = T::zero();
                            for iy in ys.clone() {
                                for ix in xs.clone() {
                                    acc = acc + xd[base + (iy * g.w + ix) * g.c + ch];
                                }
                            }
                            let count = T::from_usize(ys.len() * xs.len()).unwrap();
                            out[o + ch] = acc / count;
                        }
                    }
                }
            }
        }
    };

    match mode {
        PoolMode::Max => out
            .par_chunks_mut(out_img)
            .zip(argmax.par_chunks_mut(out_img))
            .enumerate()
            .for_each(|(b, (o, a))| fill(b, o, a)),
        PoolMode::Avg => out
            .par_chunks_mut(out_img)
            .enumerate()
            .for_each(|(b, o)| fill(b, o, &mut [])),
    }

    Ok(PoolOutput {
        output: Tensor::new(vec![n, g.oh, g.ow, g.c], out)?,
        argmax: (mode == PoolMode::Max).then_some(argmax),
    })
}

/// Gradient of [`pool2d`] with respect to its input. Max pooling needs the
/// `argmax` recorded by the forward pass.
pub fn pool2d_backward<T: Element>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    window: usize,
    stride: usize,
    mode: PoolMode,
    padding: Padding,
    argmax: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let g = PoolGeometry::new(input_shape, window, stride, padding)?;
    let n = input_shape[0];
    let expected = [n, g.oh, g.ow, g.c];
    if grad_out.shape() != expected {
        return Err(Error::shape("pool2d_backward", grad_out.shape(), &expected));
    }
    let mut dx = Tensor::zeros(input_shape);
    let gd = grad_out.data();
    match mode {
        PoolMode::Max => {
            let argmax = argmax
                .ok_or_else(|| Error::invalid("pool2d_backward", "max pooling needs argmax"))?;
            let dxd = dx.data_mut();
            for (&idx, &gv) in argmax.iter().zip(gd) {
                dxd[idx] = dxd[idx] + gv;
            }
        }
        PoolMode::Avg => {
            let (in_img, out_img) = (g.h * g.w * g.c, g.oh * g.ow * g.c);
            dx.data_mut()
                .par_chunks_mut(in_img)
                .zip(gd.par_chunks(out_img))
                .for_each(|(dxi, gi)| {
                    for oy in 0..g.oh {
                        let ys = g.span(oy, g.pad_top, g.h);
                        for ox in 0..g.ow {
                            let xs = g.span(ox, g.pad_left, g.w);
                            let count = T::from_usize(ys.len() * xs.len()).unwrap();
                            let o = (oy * g.ow + ox) * g.c;
                            for iy in ys.clone() {
                                for ix in xs.clone() {
                                    let i = (iy * g.w + ix) * g.c;
                                    for ch in 0..g.c {
                                        dxi[i + ch] = dxi[i + ch] + gi[o + ch] / count;
                                    }
                                }
                            }
                        }
                    }
                });
        }
    }
    Ok(dx)
}
