use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::loss::{one_hot, SoftDiceLossOp};
use crate::unet::{build, UNetConfig, UNetLossOp};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

fn random_labels(n: usize, hw: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * hw).map(|_| rng.random_range(0..4u8)).collect()
}

fn check(op: &dyn Differentiable, inputs: &[Tensor<f64>], tol: f64, scale: Option<f64>) -> Result<GradCheckReport> {
    match scale {
        Some(f) => grad_check(&ScaledAdjoint { inner: DynOp(op), factor: f }, inputs, tol),
        None => grad_check(op, inputs, tol),
    }
}

struct DynOp<'a>(&'a dyn Differentiable);

impl Differentiable for DynOp<'_> {
    fn name(&self) -> String {
        self.0.name()
    }
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        self.0.forward(inputs)
    }
    fn adjoint(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        self.0.adjoint(inputs, grad_out)
    }
}

/// Finite-difference checks of every primitive in 64-bit and of a tiny
/// end-to-end U-Net (base 2, depth 2, 16x16). `fault` scales every adjoint
/// by the given factor, which must make the checks fail.
pub fn standard_suite(seed: u64, fault: Option<f64>) -> Result<Vec<GradCheckReport>> {
    let s = |k: u64| seed.wrapping_mul(0x9e37_79b9).wrapping_add(k);
    let mut out = Vec::new();
    let t = PRIMITIVE_TOLERANCE;

    let conv = [random_tensor(&[2, 3, 6, 5], s(1)), random_tensor(&[4, 3, 3, 3], s(2)), random_tensor(&[4], s(3))];
    out.push(check(&Conv2dOp, &conv, t, fault)?);
    let c11 = [random_tensor(&[2, 3, 4, 4], s(4)), random_tensor(&[5, 3, 1, 1], s(5)), random_tensor(&[5], s(6))];
    out.push(check(&Conv1x1Op, &c11, t, fault)?);
    out.push(check(&ReluOp, &[random_off_kink(&[2, 3, 4, 4], 0.05, s(7))], t, fault)?);
    out.push(check(&MaxPool2Op, &[random_tensor(&[2, 3, 6, 4], s(8))], t, fault)?);
    let up = [random_tensor(&[2, 4, 3, 3], s(9)), random_tensor(&[4, 3, 2, 2], s(10)), random_tensor(&[3], s(11))];
    out.push(check(&UpConv2Op, &up, t, fault)?);
    let cat = [random_tensor(&[2, 3, 4, 4], s(12)), random_tensor(&[2, 2, 4, 4], s(13))];
    out.push(check(&ConcatOp, &cat, t, fault)?);
    out.push(check(&SoftmaxOp, &[random_tensor(&[2, 4, 3, 3], s(14)).scale(3.0)], t, fault)?);

    let target = one_hot::<f64>(&random_labels(2, 36, s(15)), 2, 4, 6, 6)?;
    let probs = softmax_channels(&random_tensor(&[2, 4, 6, 6], s(16)).scale(2.0))?;
    let dice = SoftDiceLossOp { target, smooth: 1.0 };
    out.push(check(&dice, &[probs], t, fault)?);

    let config = UNetConfig {
        in_channels: 1,
        num_classes: 4,
        base_channels: 2,
        depth: 2,
        seed: s(17),
    };
    let model = build::<f64>(&config)?;
    let op = UNetLossOp {
        input: random_tensor(&[2, 1, 16, 16], s(18)),
        target: one_hot::<f64>(&random_labels(2, 256, s(19)), 2, 4, 16, 16)?,
        config,
        smooth: 1.0,
    };
    // nonzero biases keep pre-activations of dead regions off the ReLU kink
    let params: Vec<Tensor<f64>> = model
        .params
        .iter()
        .enumerate()
        .map(|(i, (name, p))| {
            if name.ends_with("bias") {
                random_tensor(p.shape(), s(100 + i as u64)).scale(0.1)
            } else {
                p.clone()
            }
        })
        .collect();
    out.push(check(&op, &params, END_TO_END_TOLERANCE, fault)?);
    Ok(out)
}
