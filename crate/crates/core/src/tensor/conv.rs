//! im2col convolution kernels (cross-correlation, zero padding).
//!
//! Work is split across samples only. Each sample's result is produced by a
//! single thread with a fixed loop order, and per-sample weight gradients are
//! summed in ascending sample order, so the output is bit-identical for any
//! thread count.

use rayon::prelude::*;

use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_chw(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }
}

/// Output spatial extent for one axis, `floor((size + 2*pad - k) / stride) + 1`.
pub fn conv2d_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || size + 2 * pad < k {
        return None;
    }
    Some((size + 2 * pad - k) / stride + 1)
}

fn geometry(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Geometry> {
    let [batch, in_c, in_h, in_w] = *input else {
        return Err(Error::dim("input", format!("expected NCHW, got {input:?}")));
    };
    let [out_c, k_in, kh, kw] = *kernel else {
        return Err(Error::dim("kernel", format!("expected [Cout,Cin,K,K], got {kernel:?}")));
    };
    if k_in != in_c {
        return Err(Error::dim("channels", format!("input has {in_c} channels, kernel expects {k_in}")));
    }
    if kh != kw {
        return Err(Error::dim("kernel", format!("non-square kernel {kh}x{kw}")));
    }
    let out_h = conv2d_output_size(in_h, kh, stride, pad)
        .ok_or_else(|| Error::dim("height", format!("H={in_h} K={kh} stride={stride} pad={pad}")))?;
    let out_w = conv2d_output_size(in_w, kw, stride, pad)
        .ok_or_else(|| Error::dim("width", format!("W={in_w} K={kw} stride={stride} pad={pad}")))?;
    Ok(Geometry { batch, in_c, in_h, in_w, out_c, k: kh, stride, pad, out_h, out_w })
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let hw = g.out_hw();
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        dst[oh * g.out_w + ow] =
                            if ih >= 0 && (ih as usize) < g.in_h && iw >= 0 && (iw as usize) < g.in_w {
                                x[(c * g.in_h + ih as usize) * g.in_w + iw as usize]
                            } else {
                                T::zero()
                            };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, cols: &[T], dx: &mut [T]) {
    let hw = g.out_hw();
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.in_h {
                        continue;
                    }
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw < 0 || iw as usize >= g.in_w {
                            continue;
                        }
                        let at = (c * g.in_h + ih as usize) * g.in_w + iw as usize;
                        dx[at] = dx[at] + src[oh * g.out_w + ow];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input.shape(), kernel.shape(), stride, pad)?;
    let mut out = Tensor::zeros(&[g.batch, g.out_c, g.out_h, g.out_w]);
    let per_out = g.out_c * g.out_hw();
    let w = kernel.data();
    out.data_mut().par_chunks_mut(per_out).zip(input.data().par_chunks(g.in_chw())).for_each_init(
        || vec![T::zero(); g.col_rows() * g.out_hw()],
        |cols, (y, x)| {
            im2col(&g, x, cols);
            gemm(false, false, g.out_c, g.out_hw(), g.col_rows(), w, cols, y, false);
        },
    );
    Ok(out)
}

/// Gradient with respect to the input of [`conv2d_forward`], computed with
/// `kernel` standing in for the forward weights. Passing the forward weights
/// gives the exact gradient; feedback-alignment variants pass a substitute.
pub fn conv2d_input_grad<T: Scalar>(
    delta_out: &Tensor<T>,
    kernel: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input_shape, kernel.shape(), stride, pad)?;
    expect_delta_shape(&g, delta_out.shape())?;
    let mut dx = Tensor::zeros(input_shape);
    let w = kernel.data();
    dx.data_mut().par_chunks_mut(g.in_chw()).zip(delta_out.data().par_chunks(g.out_c * g.out_hw())).for_each_init(
        || vec![T::zero(); g.col_rows() * g.out_hw()],
        |dcols, (dxs, d)| {
            gemm(true, false, g.col_rows(), g.out_hw(), g.out_c, w, d, dcols, false);
            col2im(&g, dcols, dxs);
        },
    );
    Ok(dx)
}

/// Gradient with respect to the kernel of [`conv2d_forward`], summed over the
/// batch. `k` is the (square) kernel extent.
pub fn conv2d_weight_grad<T: Scalar>(
    input: &Tensor<T>,
    delta_out: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let out_c = match delta_out.shape() {
        [_, c, _, _] => *c,
        s => return Err(Error::dim("delta", format!("expected NCHW, got {s:?}"))),
    };
    let in_c = match input.shape() {
        [_, c, _, _] => *c,
        s => return Err(Error::dim("input", format!("expected NCHW, got {s:?}"))),
    };
    let kshape = [out_c, in_c, k, k];
    let g = geometry(input.shape(), &kshape, stride, pad)?;
    expect_delta_shape(&g, delta_out.shape())?;
    let wlen = g.out_c * g.col_rows();
    let partials: Vec<Vec<T>> = input
        .data()
        .par_chunks(g.in_chw())
        .zip(delta_out.data().par_chunks(g.out_c * g.out_hw()))
        .map_init(
            || vec![T::zero(); g.col_rows() * g.out_hw()],
            |cols, (x, d)| {
                im2col(&g, x, cols);
                let mut dw = vec![T::zero(); wlen];
                gemm(false, true, g.out_c, g.col_rows(), g.out_hw(), d, cols, &mut dw, false);
                dw
            },
        )
        .collect();
    let mut dw = vec![T::zero(); wlen];
    for part in &partials {
        for (acc, v) in dw.iter_mut().zip(part) {
            *acc = *acc + *v;
        }
    }
    Tensor::from_vec(&kshape, dw)
}

fn expect_delta_shape(g: &Geometry, delta: &[usize]) -> Result<()> {
    if delta.len() != 4 {
        return Err(Error::dim("delta", format!("expected NCHW, got {delta:?}")));
    }
    let want = [g.batch, g.out_c, g.out_h, g.out_w];
    for (axis, (name, (&got, &exp))) in
        ["batch", "channels", "height", "width"].iter().zip(delta.iter().zip(&want)).enumerate()
    {
        if got != exp {
            return Err(Error::dim(*name, format!("delta axis {axis} is {got}, expected {exp}")));
        }
    }
    Ok(())
}
