//! 2x2 transposed convolution with stride 2.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Scalar, Tensor};

use super::conv::{ConvContext, ConvGrads};

fn check<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4("upconv2")?;
    let (wc, k, kh, kw) = weight.dims4("upconv2")?;
    if kh != 2 || kw != 2 {
        return Err(Error::shape("upconv2", format!("kernel must be 2x2, got {kh}x{kw}")));
    }
    if wc != c {
        return Err(Error::shape(
            "upconv2",
            format!("input channels {c} do not match weight in-channels {wc}"),
        ));
    }
    if bias.shape() != [k] {
        return Err(Error::shape(
            "upconv2",
            format!("bias shape {:?} does not match out-channels {k}", bias.shape()),
        ));
    }
    Ok((n, c, h, w, k))
}

/// `[N,C,H,W] -> [N,K,2H,2W]`; every input pixel paints a 2x2 block.
pub fn upconv2<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, ConvContext<T>)> {
    let (n, c, h, w, k) = check(input, weight, bias)?;
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * k * oh * ow];
    out.par_chunks_mut(k * oh * ow)
        .enumerate()
        .for_each(|(i, dst)| {
            // rows indexed (k, a, b), columns (y, x)
            let mut blocks = vec![T::zero(); k * 4 * hw];
            gemm(
                Mat::new(weight.data(), c, k * 4).t(),
                Mat::new(input.item(i), c, hw),
                &mut blocks,
                false,
            );
            for kk in 0..k {
                let b = bias.data()[kk];
                let plane = &mut dst[kk * oh * ow..(kk + 1) * oh * ow];
                for a in 0..2 {
                    for bb in 0..2 {
                        let src = &blocks[(kk * 4 + a * 2 + bb) * hw..][..hw];
                        for y in 0..h {
                            let row = &mut plane[(2 * y + a) * ow..(2 * y + a + 1) * ow];
                            for x in 0..w {
                                row[2 * x + bb] = src[y * w + x] + b;
                            }
                        }
                    }
                }
            }
        });
    Ok((
        Tensor::from_parts_unchecked(vec![n, k, oh, ow], out),
        ConvContext {
            input: input.clone(),
        },
    ))
}

pub fn upconv2_backward<T: Scalar>(
    ctx: &ConvContext<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (n, c, h, w) = ctx.input.dims4("upconv2_backward")?;
    let k = weight.shape()[1];
    let (oh, ow) = (2 * h, 2 * w);
    if grad_out.shape() != [n, k, oh, ow] {
        return Err(Error::shape(
            "upconv2_backward",
            format!(
                "gradient shape {:?} does not match output [{n}, {k}, {oh}, {ow}]",
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
            let mut blocks = vec![T::zero(); k * 4 * hw];
            let mut gb = vec![T::zero(); k];
            for kk in 0..k {
                let plane = &go[kk * oh * ow..(kk + 1) * oh * ow];
                gb[kk] = plane.iter().copied().sum();
                for a in 0..2 {
                    for bb in 0..2 {
                        let dst = &mut blocks[(kk * 4 + a * 2 + bb) * hw..][..hw];
                        for y in 0..h {
                            let row = &plane[(2 * y + a) * ow..(2 * y + a + 1) * ow];
                            for x in 0..w {
                                dst[y * w + x] = row[2 * x + bb];
                            }
                        }
                    }
                }
            }
            let mut gw = vec![T::zero(); c * k * 4];
            gemm(
                Mat::new(ctx.input.item(i), c, hw),
                Mat::new(&blocks, k * 4, hw).t(),
                &mut gw,
                false,
            );
            gemm(
                Mat::new(weight.data(), c, k * 4),
                Mat::new(&blocks, k * 4, hw),
                gin,
                false,
            );
            (gw, gb)
        })
        .collect();
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); k];
    for (w_i, b_i) in parts {
        gw.iter_mut().zip(&w_i).for_each(|(a, &v)| *a += v);
        gb.iter_mut().zip(&b_i).for_each(|(a, &v)| *a += v);
    }
    Ok(ConvGrads {
        input: Tensor::from_parts_unchecked(vec![n, c, h, w], grad_in),
        weight: Tensor::from_parts_unchecked(weight.shape().to_vec(), gw),
        bias: Tensor::from_parts_unchecked(vec![k], gb),
    })
}
