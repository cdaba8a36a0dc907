//! Same-padded 3x3 convolution and 1x1 channel mixing.
//!
//! Both are cross-correlations lowered to GEMM. Batch items are processed
//! independently and per-item weight gradients are reduced in item order,
//! so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Scalar, Tensor};

/// Saved input of a convolution.
#[derive(Debug, Clone)]
pub struct ConvContext<T: Scalar> {
    pub(crate) input: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check_weight<T: Scalar>(
    op: &'static str,
    in_channels: usize,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    kernel: usize,
) -> Result<usize> {
    let (k, c, kh, kw) = weight.dims4(op)?;
    if kh != kernel || kw != kernel {
        return Err(Error::shape(
            op,
            format!("kernel must be {kernel}x{kernel}, got {kh}x{kw}"),
        ));
    }
    if c != in_channels {
        return Err(Error::shape(
            op,
            format!("input channels {in_channels} do not match weight in-channels {c}"),
        ));
    }
    if bias.shape() != [k] {
        return Err(Error::shape(
            op,
            format!("bias shape {:?} does not match out-channels {k}", bias.shape()),
        ));
    }
    Ok(k)
}

/// `[C, H, W]` -> `[C*9, H*W]` with zero padding of one on each border.
fn im2col3<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &src[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src_row[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src_row),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src_row[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatter-add `[C*9, H*W]` back onto `[C, H, W]`.
fn col2im3<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, dst: &mut [T]) {
    let hw = h * w;
    dst.iter_mut().for_each(|v| *v = T::zero());
    for ch in 0..c {
        let plane = &mut dst[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let out = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => out[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(o, &g)| *o += g),
                        1 => out.iter_mut().zip(src).for_each(|(o, &g)| *o += g),
                        _ => out[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(o, &g)| *o += g),
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], hw: usize) {
    for (k, &b) in bias.iter().enumerate() {
        out[k * hw..(k + 1) * hw].iter_mut().for_each(|v| *v += b);
    }
}

fn reduce_in_order<T: Scalar>(parts: Vec<(Vec<T>, Vec<T>)>, wlen: usize, blen: usize) -> (Vec<T>, Vec<T>) {
    let mut gw = vec![T::zero(); wlen];
    let mut gb = vec![T::zero(); blen];
    for (w, b) in parts {
        gw.iter_mut().zip(&w).for_each(|(a, &v)| *a += v);
        gb.iter_mut().zip(&b).for_each(|(a, &v)| *a += v);
    }
    (gw, gb)
}

/// 3x3 cross-correlation, zero padding 1, stride 1: `[N,C,H,W] -> [N,K,H,W]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, ConvContext<T>)> {
    let (n, c, h, w) = input.dims4("conv2d")?;
    let k = check_weight("conv2d", c, weight, bias, 3)?;
    let hw = h * w;
    let mut out = vec![T::zero(); n * k * hw];
    out.par_chunks_mut(k * hw)
        .enumerate()
        .for_each(|(i, dst)| {
            let mut col = vec![T::zero(); c * 9 * hw];
            im2col3(input.item(i), c, h, w, &mut col);
            gemm(
                Mat::new(weight.data(), k, c * 9),
                Mat::new(&col, c * 9, hw),
                dst,
                false,
            );
            add_bias(dst, bias.data(), hw);
        });
    Ok((
        Tensor::from_parts_unchecked(vec![n, k, h, w], out),
        ConvContext {
            input: input.clone(),
        },
    ))
}

pub fn conv2d_backward<T: Scalar>(
    ctx: &ConvContext<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (n, c, h, w) = ctx.input.dims4("conv2d_backward")?;
    let k = weight.shape()[0];
    if grad_out.shape() != [n, k, h, w] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "gradient shape {:?} does not match output [{n}, {k}, {h}, {w}]",
                grad_out.shape()
            ),
        ));
    }
    let hw = h * w;
    let mut grad_in = vec![T::zero(); n * c * hw];
    let parts: Vec<(Vec<T>, Vec<T>)> = grad_in
        .par_chunks_mut(c * hw)
        .enumerate()
        .map(|(i, gin)| {
            let go = grad_out.item(i);
            let mut col = vec![T::zero(); c * 9 * hw];
            im2col3(ctx.input.item(i), c, h, w, &mut col);
            let mut gw = vec![T::zero(); k * c * 9];
            gemm(
                Mat::new(go, k, hw),
                Mat::new(&col, c * 9, hw).t(),
                &mut gw,
                false,
            );
            let gb: Vec<T> = (0..k).map(|kk| go[kk * hw..(kk + 1) * hw].iter().copied().sum()).collect();
            gemm(
                Mat::new(weight.data(), k, c * 9).t(),
                Mat::new(go, k, hw),
                &mut col,
                false,
            );
            col2im3(&col, c, h, w, gin);
            (gw, gb)
        })
        .collect();
    let (gw, gb) = reduce_in_order(parts, weight.len(), k);
    Ok(ConvGrads {
        input: Tensor::from_parts_unchecked(vec![n, c, h, w], grad_in),
        weight: Tensor::from_parts_unchecked(weight.shape().to_vec(), gw),
        bias: Tensor::from_parts_unchecked(vec![k], gb),
    })
}

/// Per-pixel linear map across channels: `[N,C,H,W] -> [N,K,H,W]`.
pub fn conv1x1<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, ConvContext<T>)> {
    let (n, c, h, w) = input.dims4("conv1x1")?;
    let k = check_weight("conv1x1", c, weight, bias, 1)?;
    let hw = h * w;
    let mut out = vec![T::zero(); n * k * hw];
    out.par_chunks_mut(k * hw)
        .enumerate()
        .for_each(|(i, dst)| {
            gemm(
                Mat::new(weight.data(), k, c),
                Mat::new(input.item(i), c, hw),
                dst,
                false,
            );
            add_bias(dst, bias.data(), hw);
        });
    Ok((
        Tensor::from_parts_unchecked(vec![n, k, h, w], out),
        ConvContext {
            input: input.clone(),
        },
    ))
}

pub fn conv1x1_backward<T: Scalar>(
    ctx: &ConvContext<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (n, c, h, w) = ctx.input.dims4("conv1x1_backward")?;
    let k = weight.shape()[0];
    if grad_out.shape() != [n, k, h, w] {
        return Err(Error::shape(
            "conv1x1_backward",
            format!(
                "gradient shape {:?} does not match output [{n}, {k}, {h}, {w}]",
                grad_out.shape()
            ),
        ));
    }
    let hw = h * w;
    let mut grad_in = vec![T::zero(); n * c * hw];
    let parts: Vec<(Vec<T>, Vec<T>)> = grad_in
        .par_chunks_mut(c * hw)
        .enumerate()
        .map(|(i, gin)| {
            let go = grad_out.item(i);
            let mut gw = vec![T::zero(); k * c];
            gemm(
                Mat::new(go, k, hw),
                Mat::new(ctx.input.item(i), c, hw).t(),
                &mut gw,
                false,
            );
            let gb: Vec<T> = (0..k).map(|kk| go[kk * hw..(kk + 1) * hw].iter().copied().sum()).collect();
            gemm(
                Mat::new(weight.data(), k, c).t(),
                Mat::new(go, k, hw),
                gin,
                false,
            );
            (gw, gb)
        })
        .collect();
    let (gw, gb) = reduce_in_order(parts, weight.len(), k);
    Ok(ConvGrads {
        input: Tensor::from_parts_unchecked(vec![n, c, h, w], grad_in),
        weight: Tensor::from_parts_unchecked(weight.shape().to_vec(), gw),
        bias: Tensor::from_parts_unchecked(vec![k], gb),
    })
}
