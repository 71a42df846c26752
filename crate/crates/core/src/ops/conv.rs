use rayon::prelude::*;

use super::{output_extent, require_rank, GradPair, Padding};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tensor};

/// Images per partial sum when reducing kernel gradients. Fixed so that the
/// reduction order does not depend on the thread count.
const KERNEL_GRAD_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_c: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Conv2dGeometry {
    pub fn new(x: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        require_rank("conv2d", x, 4)?;
        require_rank("conv2d", kernel, 4)?;
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (batch, in_h, in_w, in_c) = (x[0], x[1], x[2], x[3]);
        let (kh, kw, kc, out_c) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != in_c {
            return Err(Error::shape("conv2d", x, kernel));
        }
        let (out_h, pad_top) = output_extent(in_h, kh, stride, padding)
            .ok_or_else(|| Error::EmptyOutput { op: "conv2d", input: x.to_vec() })?;
        let (out_w, pad_left) = output_extent(in_w, kw, stride, padding)
            .ok_or_else(|| Error::EmptyOutput { op: "conv2d", input: x.to_vec() })?;
        if batch == 0 || out_c == 0 {
            return Err(Error::EmptyOutput { op: "conv2d", input: x.to_vec() });
        }
        Ok(Self {
            batch,
            in_h,
            in_w,
            in_c,
            kh,
            kw,
            out_c,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    fn image_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    /// Source coordinate for output index `o` and kernel tap `k`, if in bounds.
    #[inline]
    fn source(&self, o: usize, k: usize, stride_pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(stride_pad)?;
        (pos < extent).then_some(pos)
    }

    fn im2col<T: Element>(&self, image: &[T], col: &mut [T]) {
        let (pl, c) = (self.patch_len(), self.in_c);
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut col[(oy * self.out_w + ox) * pl..][..pl];
                for i in 0..self.kh {
                    let iy = self.source(oy, i, self.pad_top, self.in_h);
                    for j in 0..self.kw {
                        let dst = &mut row[(i * self.kw + j) * c..][..c];
                        match (iy, self.source(ox, j, self.pad_left, self.in_w)) {
                            (Some(iy), Some(ix)) => {
                                dst.copy_from_slice(&image[(iy * self.in_w + ix) * c..][..c])
                            }
                            _ => dst.fill(T::zero()),
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Element>(&self, col: &[T], image: &mut [T]) {
        let (pl, c) = (self.patch_len(), self.in_c);
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &col[(oy * self.out_w + ox) * pl..][..pl];
                for i in 0..self.kh {
                    let Some(iy) = self.source(oy, i, self.pad_top, self.in_h) else {
                        continue;
                    };
                    for j in 0..self.kw {
                        let Some(ix) = self.source(ox, j, self.pad_left, self.in_w) else {
                            continue;
                        };
                        let src = &row[(i * self.kw + j) * c..][..c];
                        let dst = &mut image[(iy * self.in_w + ix) * c..][..c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation over NHWC input with an `[kh, kw, in_c, out_c]` kernel.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = Conv2dGeometry::new(x.shape(), kernel.shape(), stride, padding)?;
    let (p, pl, f) = (g.positions(), g.patch_len(), g.out_c);
    let mut out = vec![T::zero(); g.batch * p * f];
    out.par_chunks_mut(p * f)
        .zip(x.data().par_chunks(g.image_len()))
        .for_each_init(Vec::new, |col, (out_img, image)| {
            if g.is_pointwise() {
                gemm(image, p, pl, false, kernel.data(), pl, f, false, out_img, false);
            } else {
                col.resize(p * pl, T::zero());
                g.im2col(image, col);
                gemm(col, p, pl, false, kernel.data(), pl, f, false, out_img, false);
            }
        });
    Tensor::new(vec![g.batch, g.out_h, g.out_w, f], out)
}

/// Gradients of [`conv2d`] with respect to the input and/or the kernel.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: Padding,
    need_input: bool,
    need_kernel: bool,
) -> Result<GradPair<T>> {
    let g = Conv2dGeometry::new(x.shape(), kernel.shape(), stride, padding)?;
    let expected = [g.batch, g.out_h, g.out_w, g.out_c];
    if grad_out.shape() != expected {
        return Err(Error::shape("conv2d_backward", grad_out.shape(), &expected));
    }
    let (p, pl, f) = (g.positions(), g.patch_len(), g.out_c);

    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); x.len()];
        dx.par_chunks_mut(g.image_len())
            .zip(grad_out.data().par_chunks(p * f))
            .for_each_init(Vec::new, |dcol, (dx_img, dy)| {
                if g.is_pointwise() {
                    gemm(dy, p, f, false, kernel.data(), pl, f, true, dx_img, false);
                } else {
                    dcol.resize(p * pl, T::zero());
                    gemm(dy, p, f, false, kernel.data(), pl, f, true, dcol, false);
                    g.col2im_add(dcol, dx_img);
                }
            });
        Tensor::new(x.shape().to_vec(), dx)
    });

    let dk = need_kernel.then(|| {
        let chunk_imgs = KERNEL_GRAD_CHUNK;
        let partials: Vec<Vec<T>> = x
            .data()
            .par_chunks(g.image_len() * chunk_imgs)
            .zip(grad_out.data().par_chunks(p * f * chunk_imgs))
            .map(|(images, dys)| {
                let mut acc = vec![T::zero(); pl * f];
                let mut col = Vec::new();
                for (image, dy) in images.chunks(g.image_len()).zip(dys.chunks(p * f)) {
                    let col: &[T] = if g.is_pointwise() {
                        image
                    } else {
                        col.resize(p * pl, T::zero());
                        g.im2col(image, &mut col);
                        &col
                    };
                    gemm(col, p, pl, true, dy, p, f, false, &mut acc, true);
                }
                acc
            })
            .collect();
        let mut total = vec![T::zero(); pl * f];
        for part in partials {
            for (t, v) in total.iter_mut().zip(part) {
                *t = *t + v;
            }
        }
        Tensor::new(kernel.shape().to_vec(), total)
    });

    Ok((dx.transpose()?, dk.transpose()?))
}
