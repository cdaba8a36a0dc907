//! Layer primitives with explicit forward and adjoint passes.
//!
//! Every forward returns its output together with a context holding exactly
//! what the adjoint needs, so backward never re-runs the forward pass.

mod activation;
mod concat;
mod conv;
mod gradcheck;
mod pool;
mod suite;
mod upconv;

pub use activation::{relu, relu_backward, softmax_channels, softmax_channels_backward, ReluContext};
pub use concat::{concat_channels, concat_channels_all, concat_channels_backward, split_channels, ConcatContext};
pub use conv::{conv1x1, conv1x1_backward, conv2d, conv2d_backward, ConvContext, ConvGrads};
pub use gradcheck::{
    grad_check, grad_check_with, random_off_kink, random_tensor, rel_error, Differentiable, GradCheckConfig,
    GradCheckReport, ScaledAdjoint,
};
pub use pool::{maxpool2, maxpool2_backward, MaxPoolContext};
pub use suite::{standard_suite, END_TO_END_TOLERANCE, PRIMITIVE_TOLERANCE};
pub use upconv::{upconv2, upconv2_backward};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn expect_inputs(name: &'static str, inputs: &[Tensor<f64>], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::shape(name, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

/// Inputs: `[input, weight, bias]`.
pub struct Conv2dOp;
/// Inputs: `[input, weight, bias]`.
pub struct Conv1x1Op;
/// Inputs: `[input, weight, bias]`.
pub struct UpConv2Op;
pub struct ReluOp;
pub struct MaxPool2Op;
/// Inputs: `[a, b]`.
pub struct ConcatOp;
pub struct SoftmaxOp;

macro_rules! conv_like {
    ($ty:ident, $name:literal, $fwd:ident, $bwd:ident) => {
        impl Differentiable for $ty {
            fn name(&self) -> String {
                $name.into()
            }
            fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
                expect_inputs($name, inputs, 3)?;
                Ok($fwd(&inputs[0], &inputs[1], &inputs[2])?.0)
            }
            fn adjoint(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
                expect_inputs($name, inputs, 3)?;
                let (_, ctx) = $fwd(&inputs[0], &inputs[1], &inputs[2])?;
                let g = $bwd(&ctx, &inputs[1], grad_out)?;
                Ok(vec![g.input, g.weight, g.bias])
            }
        }
    };
}

conv_like!(Conv2dOp, "conv2d", conv2d, conv2d_backward);
conv_like!(Conv1x1Op, "conv1x1", conv1x1, conv1x1_backward);
conv_like!(UpConv2Op, "upconv2", upconv2, upconv2_backward);

impl Differentiable for ReluOp {
    fn name(&self) -> String {
        "relu".into()
    }
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        expect_inputs("relu", inputs, 1)?;
        Ok(relu(&inputs[0]).0)
    }
    fn adjoint(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        expect_inputs("relu", inputs, 1)?;
        let (_, ctx) = relu(&inputs[0]);
        Ok(vec![relu_backward(&ctx, grad_out)?])
    }
}

impl Differentiable for MaxPool2Op {
    fn name(&self) -> String {
        "maxpool2".into()
    }
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        expect_inputs("maxpool2", inputs, 1)?;
        Ok(maxpool2(&inputs[0])?.0)
    }
    fn adjoint(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        expect_inputs("maxpool2", inputs, 1)?;
        let (_, ctx) = maxpool2(&inputs[0])?;
        Ok(vec![maxpool2_backward(&ctx, grad_out)?])
    }
}

impl Differentiable for ConcatOp {
    fn name(&self) -> String {
        "concat_channels".into()
    }
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        expect_inputs("concat_channels", inputs, 2)?;
        Ok(concat_channels(&inputs[0], &inputs[1])?.0)
    }
    fn adjoint(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        expect_inputs("concat_channels", inputs, 2)?;
        let (_, ctx) = concat_channels(&inputs[0], &inputs[1])?;
        concat_channels_backward(&ctx, grad_out)
    }
}

impl Differentiable for SoftmaxOp {
    fn name(&self) -> String {
        "softmax_channels".into()
    }
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        expect_inputs("softmax_channels", inputs, 1)?;
        softmax_channels(&inputs[0])
    }
    fn adjoint(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        expect_inputs("softmax_channels", inputs, 1)?;
        let p = softmax_channels(&inputs[0])?;
        Ok(vec![softmax_channels_backward(&p, grad_out)?])
    }
}
