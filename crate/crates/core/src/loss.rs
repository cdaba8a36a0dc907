//! Multi-class soft Dice loss: `K - sum_c DSC_c` over probabilities.
//!
//! Sums run over every pixel of the whole batch before the per-class ratio
//! is formed. Sums are accumulated in `f64` regardless of the tensor type.

use crate::autodiff::{softmax_channels, softmax_channels_backward, Differentiable};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_SMOOTH: f64 = 1.0;

struct ClassSums {
    inter: Vec<f64>,
    pred: Vec<f64>,
    target: Vec<f64>,
}

fn class_sums<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<ClassSums> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "soft_dice",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let (n, k, h, w) = pred.dims4("soft_dice")?;
    let hw = h * w;
    let mut sums = ClassSums {
        inter: vec![0.0; k],
        pred: vec![0.0; k],
        target: vec![0.0; k],
    };
    for b in 0..n {
        let p = pred.item(b);
        let t = target.item(b);
        for c in 0..k {
            for (&pv, &tv) in p[c * hw..(c + 1) * hw].iter().zip(&t[c * hw..(c + 1) * hw]) {
                let (pv, tv) = (pv.as_f64(), tv.as_f64());
                sums.inter[c] += pv * tv;
                sums.pred[c] += pv;
                sums.target[c] += tv;
            }
        }
    }
    Ok(sums)
}

/// Per-class `(2 sum(p t) + s) / (sum(p) + sum(t) + s)`.
pub fn soft_dice<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<Vec<f64>> {
    let s = class_sums(pred, target)?;
    Ok((0..s.inter.len())
        .map(|c| (2.0 * s.inter[c] + smooth) / (s.pred[c] + s.target[c] + smooth))
        .collect())
}

/// `K - sum_c soft_dice_c`; with four classes this is `4 - sum DSC`.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<f64> {
    let d = soft_dice(pred, target, smooth)?;
    Ok(d.len() as f64 - d.iter().sum::<f64>())
}

#[derive(Debug, Clone)]
pub struct DiceLossOutput<T: Scalar> {
    pub loss: f64,
    pub per_class: Vec<f64>,
    /// Gradient of the loss with respect to the probabilities.
    pub grad: Tensor<T>,
}

pub fn dice_loss_with_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<DiceLossOutput<T>> {
    let s = class_sums(pred, target)?;
    let (n, k, h, w) = pred.dims4("dice_loss")?;
    let hw = h * w;
    let denom: Vec<f64> = (0..k).map(|c| s.pred[c] + s.target[c] + smooth).collect();
    let numer: Vec<f64> = (0..k).map(|c| 2.0 * s.inter[c] + smooth).collect();
    let per_class: Vec<f64> = (0..k).map(|c| numer[c] / denom[c]).collect();
    // d(-D_c)/dp = (numer - 2 t denom) / denom^2
    let mut grad = pred.zeros_like();
    for b in 0..n {
        let t = target.item(b).to_vec();
        let g = grad.item_mut(b);
        for c in 0..k {
            let inv = 1.0 / (denom[c] * denom[c]);
            for i in c * hw..(c + 1) * hw {
                g[i] = T::from_f64_lossy((numer[c] - 2.0 * t[i].as_f64() * denom[c]) * inv);
            }
        }
    }
    Ok(DiceLossOutput {
        loss: k as f64 - per_class.iter().sum::<f64>(),
        per_class,
        grad,
    })
}

/// Loss on logits: softmax followed by Dice loss, with the gradient taken
/// with respect to the logits.
pub fn dice_loss_on_logits<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<DiceLossOutput<T>> {
    let probs = softmax_channels(logits)?;
    let out = dice_loss_with_grad(&probs, target, smooth)?;
    let grad = softmax_channels_backward(&probs, &out.grad)?;
    Ok(DiceLossOutput { grad, ..out })
}

/// One-hot encode `[N, H, W]` labels into `[N, K, H, W]`.
pub fn one_hot<T: Scalar>(labels: &[u8], n: usize, classes: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if labels.len() != n * h * w {
        return Err(Error::shape(
            "one_hot",
            format!("{} labels for {n}x{h}x{w}", labels.len()),
        ));
    }
    let hw = h * w;
    let mut t = Tensor::zeros(&[n, classes, h, w])?;
    for b in 0..n {
        let item = t.item_mut(b);
        for (px, &l) in labels[b * hw..(b + 1) * hw].iter().enumerate() {
            let l = l as usize;
            if l >= classes {
                return Err(Error::shape("one_hot", format!("label {l} >= {classes} classes")));
            }
            item[l * hw + px] = T::one();
        }
    }
    Ok(t)
}

/// Dice loss as a differentiable op over the probabilities `[pred]`.
pub struct SoftDiceLossOp {
    pub target: Tensor<f64>,
    pub smooth: f64,
}

impl Differentiable for SoftDiceLossOp {
    fn name(&self) -> String {
        "soft_dice_loss".into()
    }
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Tensor::new(vec![1], vec![dice_loss(&inputs[0], &self.target, self.smooth)?])
    }
    fn adjoint(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let out = dice_loss_with_grad(&inputs[0], &self.target, self.smooth)?;
        Ok(vec![out.grad.scale(grad_out.data()[0])])
    }
}

/// Dice loss composed with the channel softmax, over `[logits]`.
pub struct DiceOnLogitsOp {
    pub target: Tensor<f64>,
    pub smooth: f64,
}

impl Differentiable for DiceOnLogitsOp {
    fn name(&self) -> String {
        "softmax+dice_loss".into()
    }
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let p = softmax_channels(&inputs[0])?;
        Tensor::new(vec![1], vec![dice_loss(&p, &self.target, self.smooth)?])
    }
    fn adjoint(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let out = dice_loss_on_logits(&inputs[0], &self.target, self.smooth)?;
        Ok(vec![out.grad.scale(grad_out.data()[0])])
    }
}
