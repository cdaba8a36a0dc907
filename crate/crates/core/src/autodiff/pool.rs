use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Winning input index for every pooled output cell.
#[derive(Debug, Clone)]
pub struct MaxPoolContext {
    pub(crate) input_shape: Vec<usize>,
    pub(crate) argmax: Vec<u32>,
}

/// 2x2 max pooling with stride 2. Ties go to the first cell in row-major
/// window order.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolContext)> {
    let (n, c, h, w) = input.dims4("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("spatial dims {h}x{w} must both be even"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + 2 * y * w + 2 * xx;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((
        Tensor::from_parts_unchecked(vec![n, c, oh, ow], out),
        MaxPoolContext {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

/// Routes each output gradient to its recorded winner.
pub fn maxpool2_backward<T: Scalar>(ctx: &MaxPoolContext, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != ctx.argmax.len() {
        return Err(Error::shape(
            "maxpool2_backward",
            format!(
                "gradient has {} cells, pooled output had {}",
                grad_out.len(),
                ctx.argmax.len()
            ),
        ));
    }
    let mut grad_in = vec![T::zero(); ctx.input_shape.iter().product()];
    for (&idx, &g) in ctx.argmax.iter().zip(grad_out.data()) {
        grad_in[idx as usize] += g;
    }
    Ok(Tensor::from_parts_unchecked(ctx.input_shape.clone(), grad_in))
}
