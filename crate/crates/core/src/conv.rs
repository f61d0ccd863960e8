// SPDX-License-Identifier: MIT OR Apache-2.0

//! im2col convolution kernels.

use alloc::format;
use alloc::vec;

use crate::error::{shape_err, Result};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

pub fn conv_out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(shape_err("conv2d", "stride must be >= 1".into()));
    }
    if k == 0 || k > size + 2 * pad {
        return Err(shape_err(
            "conv2d",
            format!("kernel {k} larger than padded extent {}", size + 2 * pad),
        ));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

/// Unfold one `C×H×W` image into a `(C·k·k) × (H'·W')` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let plane = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &x[ch * h * w + iy as usize * w..ch * h * w + (iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the image.
#[allow(clippy::too_many_arguments)]
pub fn col2im_accumulate<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [T],
) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let plane = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolve one `C_in×H×W` image with `C_out×C_in×k×k` kernels.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (is, ks) = (input.shape(), kernels.shape());
    if is.len() != 3 || ks.len() != 4 || ks[2] != ks[3] {
        return Err(shape_err("conv2d", format!("input {is:?}, kernels {ks:?}")));
    }
    let (cin, h, w) = (is[0], is[1], is[2]);
    let (cout, k) = (ks[0], ks[2]);
    if ks[1] != cin {
        return Err(shape_err(
            "conv2d",
            format!("input has {cin} channels, kernels expect {}", ks[1]),
        ));
    }
    let ho = conv_out_extent(h, k, stride, pad)?;
    let wo = conv_out_extent(w, k, stride, pad)?;
    let rows = cin * k * k;
    let mut cols = vec![T::ZERO; rows * ho * wo];
    im2col(input.data(), cin, h, w, k, stride, pad, &mut cols);
    let mut out = vec![T::ZERO; cout * ho * wo];
    gemm(cout, rows, ho * wo, kernels.data(), false, &cols, false, T::ZERO, &mut out);
    Tensor::new(&[cout, ho, wo], out)
}
