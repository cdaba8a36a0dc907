use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Channel counts of the concatenated parts, in order.
#[derive(Debug, Clone)]
pub struct ConcatContext {
    pub(crate) channels: Vec<usize>,
}

/// Concatenates `[N,Ci,H,W]` parts along the channel axis.
pub fn concat_channels_all<T: Scalar>(parts: &[&Tensor<T>]) -> Result<(Tensor<T>, ConcatContext)> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "nothing to concatenate"))?;
    let (n, _, h, w) = first.dims4("concat_channels")?;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4("concat_channels")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("part shape {:?} does not match batch/spatial dims [{n}, _, {h}, {w}]", p.shape()),
            ));
        }
        channels.push(pc);
    }
    let total: usize = channels.iter().sum();
    let mut data = Vec::with_capacity(n * total * h * w);
    for b in 0..n {
        for p in parts {
            data.extend_from_slice(p.item(b));
        }
    }
    Ok((
        Tensor::from_parts_unchecked(vec![n, total, h, w], data),
        ConcatContext { channels },
    ))
}

/// Skip features first, upsampled features second.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, ConcatContext)> {
    concat_channels_all(&[a, b])
}

/// Adjoint of concatenation: splits a gradient back into per-part tensors.
pub fn concat_channels_backward<T: Scalar>(ctx: &ConcatContext, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = grad_out.dims4("concat_channels_backward")?;
    if c != ctx.channels.iter().sum::<usize>() {
        return Err(Error::shape(
            "concat_channels_backward",
            format!("gradient has {c} channels, parts sum to {}", ctx.channels.iter().sum::<usize>()),
        ));
    }
    let hw = h * w;
    let mut outs: Vec<Vec<T>> = ctx.channels.iter().map(|&pc| Vec::with_capacity(n * pc * hw)).collect();
    for b in 0..n {
        let item = grad_out.item(b);
        let mut offset = 0;
        for (out, &pc) in outs.iter_mut().zip(&ctx.channels) {
            out.extend_from_slice(&item[offset..offset + pc * hw]);
            offset += pc * hw;
        }
    }
    Ok(outs
        .into_iter()
        .zip(&ctx.channels)
        .map(|(d, &pc)| Tensor::from_parts_unchecked(vec![n, pc, h, w], d))
        .collect())
}

/// Splits `[N, Ca+Cb, H, W]` at channel `ca`.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, c, _, _) = t.dims4("split_channels")?;
    if ca == 0 || ca >= c {
        return Err(Error::shape(
            "split_channels",
            format!("split point {ca} outside 1..{c}"),
        ));
    }
    let mut parts = concat_channels_backward(
        &ConcatContext {
            channels: vec![ca, c - ca],
        },
        t,
    )?;
    let b = parts.pop().expect("two parts");
    let a = parts.pop().expect("two parts");
    Ok((a, b))
}
