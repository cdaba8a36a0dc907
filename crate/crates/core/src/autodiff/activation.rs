use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Sign mask of the pre-activation.
#[derive(Debug, Clone)]
pub struct ReluContext {
    pub(crate) positive: Vec<bool>,
    pub(crate) shape: Vec<usize>,
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, ReluContext) {
    let positive: Vec<bool> = input.data().iter().map(|&v| v > T::zero()).collect();
    let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
    (
        out,
        ReluContext {
            positive,
            shape: input.shape().to_vec(),
        },
    )
}

pub fn relu_backward<T: Scalar>(ctx: &ReluContext, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != ctx.shape.as_slice() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?} vs {:?}", grad_out.shape(), ctx.shape),
        ));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(&ctx.positive)
        .map(|(&g, &p)| if p { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts_unchecked(ctx.shape.clone(), data))
}

/// Per-pixel softmax over the channel axis of `[N,K,H,W]`.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, h, w) = logits.dims4("softmax_channels")?;
    let hw = h * w;
    let mut out = logits.clone();
    for b in 0..n {
        let item = out.item_mut(b);
        for p in 0..hw {
            let mut max = item[p];
            for c in 1..k {
                max = max.max(item[c * hw + p]);
            }
            let mut sum = T::zero();
            for c in 0..k {
                let e = (item[c * hw + p] - max).exp();
                item[c * hw + p] = e;
                sum += e;
            }
            for c in 0..k {
                item[c * hw + p] = item[c * hw + p] / sum;
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of the channel softmax given its output `probs`:
/// `dx_k = p_k (g_k - sum_j g_j p_j)`.
pub fn softmax_channels_backward<T: Scalar>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.shape() != grad_out.shape() {
        return Err(Error::shape(
            "softmax_channels_backward",
            format!("{:?} vs {:?}", probs.shape(), grad_out.shape()),
        ));
    }
    let (n, k, h, w) = probs.dims4("softmax_channels_backward")?;
    let hw = h * w;
    let mut out = probs.zeros_like();
    for b in 0..n {
        let p = probs.item(b);
        let g = grad_out.item(b);
        let dst = out.item_mut(b);
        for px in 0..hw {
            let mut inner = T::zero();
            for c in 0..k {
                inner += g[c * hw + px] * p[c * hw + px];
            }
            for c in 0..k {
                dst[c * hw + px] = p[c * hw + px] * (g[c * hw + px] - inner);
            }
        }
    }
    Ok(out)
}
