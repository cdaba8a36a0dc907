//! The 2D U-Net: a contracting path of double 3x3 conv blocks with 2x2 max
//! pooling, a bottleneck block, and an expanding path of 2x2 stride-2
//! transposed convolutions whose output is concatenated after the skip
//! features of equal resolution. A final 1x1 conv and a channel softmax
//! produce per-pixel class probabilities.
//!
//! With the default configuration (base 64, four pooling steps, one input
//! channel, four classes) the network has exactly 31,030,788 parameters.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    concat_channels, concat_channels_backward, conv1x1, conv1x1_backward, conv2d, conv2d_backward, maxpool2,
    maxpool2_backward, relu, relu_backward, softmax_channels, softmax_channels_backward, upconv2, upconv2_backward,
    ConcatContext, ConvContext, Differentiable, MaxPoolContext, ReluContext,
};
use crate::error::{Error, Result};
use crate::loss::dice_loss_with_grad;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    /// Number of pooling steps.
    pub depth: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            num_classes: 4,
            base_channels: 64,
            depth: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    UpConv2x2,
    Conv1x1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    /// Layer prefix, e.g. `enc2.conv1`.
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn kernel_area(&self) -> usize {
        match self.kind {
            LayerKind::Conv3x3 => 9,
            LayerKind::UpConv2x2 => 4,
            LayerKind::Conv1x1 => 1,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv3x3 => vec![self.out_channels, self.in_channels, 3, 3],
            LayerKind::UpConv2x2 => vec![self.in_channels, self.out_channels, 2, 2],
            LayerKind::Conv1x1 => vec![self.out_channels, self.in_channels, 1, 1],
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    /// Channels of the feature maps at pooling level `level` (0 = full
    /// resolution, `depth` = bottleneck).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial dims must be a multiple of this.
    pub fn required_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Every layer in canonical order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let conv = |name: String, i, o| LayerSpec {
            name,
            kind: LayerKind::Conv3x3,
            in_channels: i,
            out_channels: o,
        };
        let mut layers = Vec::new();
        let mut prev = self.in_channels;
        for l in 1..=self.depth {
            let c = self.channels_at(l - 1);
            layers.push(conv(format!("enc{l}.conv1"), prev, c));
            layers.push(conv(format!("enc{l}.conv2"), c, c));
            prev = c;
        }
        let cb = self.channels_at(self.depth);
        layers.push(conv("bottleneck.conv1".into(), prev, cb));
        layers.push(conv("bottleneck.conv2".into(), cb, cb));
        for l in (1..=self.depth).rev() {
            let (hi, lo) = (self.channels_at(l), self.channels_at(l - 1));
            layers.push(LayerSpec {
                name: format!("up{l}"),
                kind: LayerKind::UpConv2x2,
                in_channels: hi,
                out_channels: lo,
            });
            layers.push(conv(format!("dec{l}.conv1"), 2 * lo, lo));
            layers.push(conv(format!("dec{l}.conv2"), lo, lo));
        }
        layers.push(LayerSpec {
            name: "final".into(),
            kind: LayerKind::Conv1x1,
            in_channels: self.base_channels,
            out_channels: self.num_classes,
        });
        layers
    }

    /// `(tensor name, shape)` pairs in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .into_iter()
            .flat_map(|l| {
                let w = (format!("{}.weight", l.name), l.weight_shape());
                let b = (format!("{}.bias", l.name), vec![l.out_channels]);
                [w, b]
            })
            .collect()
    }
}

/// Named parameter store in canonical layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<T: Scalar = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for UNetParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> UNetParams<T> {
    pub fn new() -> Self {
        UNetParams {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> UNetParams<U> {
        UNetParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T: Scalar = f32> {
    pub config: UNetConfig,
    pub params: UNetParams<T>,
}

struct BlockCache<T: Scalar> {
    conv1: ConvContext<T>,
    relu1: ReluContext,
    conv2: ConvContext<T>,
    relu2: ReluContext,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache<T: Scalar> {
    encoder: Vec<(BlockCache<T>, MaxPoolContext)>,
    bottleneck: BlockCache<T>,
    /// Decoder levels in execution order (deepest first).
    decoder: Vec<(ConvContext<T>, ConcatContext, BlockCache<T>)>,
    head: ConvContext<T>,
    probs: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }
}

/// Glorot-uniform weights, zero biases, deterministic in `config.seed`.
pub fn build<T: Scalar>(config: &UNetConfig) -> Result<UNet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = UNetParams::new();
    for layer in config.layers() {
        let area = layer.kernel_area();
        let fan_in = layer.in_channels * area;
        let fan_out = layer.out_channels * area;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let w = Tensor::from_fn(&layer.weight_shape(), |_| T::from_f64_lossy(dist.sample(&mut rng)))?;
        params.insert(format!("{}.weight", layer.name), w);
        params.insert(format!("{}.bias", layer.name), Tensor::zeros(&[layer.out_channels])?);
    }
    Ok(UNet {
        config: config.clone(),
        params,
    })
}

pub fn param_count<T: Scalar>(params: &UNetParams<T>) -> usize {
    params.param_count()
}

impl<T: Scalar> UNet<T> {
    /// Wraps an existing parameter store after checking its names and
    /// shapes against the configuration.
    pub fn from_params(config: UNetConfig, params: UNetParams<T>) -> Result<Self> {
        config.validate()?;
        check_names(&config, &params)?;
        for (name, shape) in config.tensor_shapes() {
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "unet",
                    format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
        }
        Ok(UNet { config, params })
    }

    fn w(&self, layer: &str) -> Result<&Tensor<T>> {
        self.params.get(&format!("{layer}.weight"))
    }

    fn b(&self, layer: &str) -> Result<&Tensor<T>> {
        self.params.get(&format!("{layer}.bias"))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4("unet forward")?;
        if c != self.config.in_channels {
            return Err(Error::shape(
                "unet forward",
                format!("input has {c} channels, model expects {}", self.config.in_channels),
            ));
        }
        let m = self.config.required_multiple();
        for size in [h, w] {
            if size % m != 0 {
                return Err(Error::IndivisibleSpatial {
                    size,
                    multiple: m,
                    levels: self.config.depth,
                });
            }
        }
        Ok(())
    }

    fn block(&self, layer: &str, x: &Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let c1 = format!("{layer}.conv1");
        let c2 = format!("{layer}.conv2");
        let (h, conv1) = conv2d(x, self.w(&c1)?, self.b(&c1)?)?;
        let (h, relu1) = relu(&h);
        let (h, conv2) = conv2d(&h, self.w(&c2)?, self.b(&c2)?)?;
        let (h, relu2) = relu(&h);
        Ok((
            h,
            BlockCache {
                conv1,
                relu1,
                conv2,
                relu2,
            },
        ))
    }

    fn block_backward(
        &self,
        layer: &str,
        cache: &BlockCache<T>,
        grad: &Tensor<T>,
        grads: &mut UNetParams<T>,
    ) -> Result<Tensor<T>> {
        let c1 = format!("{layer}.conv1");
        let c2 = format!("{layer}.conv2");
        let g = relu_backward(&cache.relu2, grad)?;
        let g2 = conv2d_backward(&cache.conv2, self.w(&c2)?, &g)?;
        grads.insert(format!("{c2}.weight"), g2.weight);
        grads.insert(format!("{c2}.bias"), g2.bias);
        let g = relu_backward(&cache.relu1, &g2.input)?;
        let g1 = conv2d_backward(&cache.conv1, self.w(&c1)?, &g)?;
        grads.insert(format!("{c1}.weight"), g1.weight);
        grads.insert(format!("{c1}.bias"), g1.bias);
        Ok(g1.input)
    }

    /// Forward pass keeping every context needed for [`UNet::backward`].
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<ForwardCache<T>> {
        self.check_input(x)?;
        let depth = self.config.depth;
        let mut encoder = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for l in 1..=depth {
            let (out, cache) = self.block(&format!("enc{l}"), &h)?;
            let (pooled, pool) = maxpool2(&out)?;
            skips.push(out);
            encoder.push((cache, pool));
            h = pooled;
        }
        let (mut h, bottleneck) = self.block("bottleneck", &h)?;
        let mut decoder = Vec::with_capacity(depth);
        for l in (1..=depth).rev() {
            let up = format!("up{l}");
            let (u, up_ctx) = upconv2(&h, self.w(&up)?, self.b(&up)?)?;
            let skip = skips.pop().expect("one skip per level");
            let (cat, cat_ctx) = concat_channels(&skip, &u)?;
            let (out, cache) = self.block(&format!("dec{l}"), &cat)?;
            decoder.push((up_ctx, cat_ctx, cache));
            h = out;
        }
        let (logits, head) = conv1x1(&h, self.w("final")?, self.b("final")?)?;
        let probs = softmax_channels(&logits)?;
        Ok(ForwardCache {
            encoder,
            bottleneck,
            decoder,
            head,
            probs,
        })
    }

    /// Per-pixel class probabilities, `[N, in, H, W] -> [N, classes, H, W]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_train(x)?.probs)
    }

    /// Parameter gradients given the gradient of a scalar objective with
    /// respect to the output probabilities.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_probs: &Tensor<T>) -> Result<UNetParams<T>> {
        let mut grads = UNetParams::new();
        let g_logits = softmax_channels_backward(&cache.probs, grad_probs)?;
        let head = conv1x1_backward(&cache.head, self.w("final")?, &g_logits)?;
        grads.insert("final.weight", head.weight);
        grads.insert("final.bias", head.bias);
        let depth = self.config.depth;
        let mut g = head.input;
        let mut skip_grads = Vec::with_capacity(depth);
        // decoder was recorded deepest-first; unwind from level 1 upward
        for (idx, (up_ctx, cat_ctx, block)) in cache.decoder.iter().enumerate().rev() {
            let l = depth - idx;
            let g_cat = self.block_backward(&format!("dec{l}"), block, &g, &mut grads)?;
            let mut parts = concat_channels_backward(cat_ctx, &g_cat)?;
            let g_up = parts.pop().expect("two parts");
            skip_grads.push(parts.pop().expect("two parts"));
            let up = format!("up{l}");
            let gu = upconv2_backward(up_ctx, self.w(&up)?, &g_up)?;
            grads.insert(format!("{up}.weight"), gu.weight);
            grads.insert(format!("{up}.bias"), gu.bias);
            g = gu.input;
        }
        g = self.block_backward("bottleneck", &cache.bottleneck, &g, &mut grads)?;
        for (idx, (block, pool)) in cache.encoder.iter().enumerate().rev() {
            let l = idx + 1;
            let mut gp = maxpool2_backward(pool, &g)?;
            let skip = skip_grads.pop().expect("one skip gradient per level");
            gp.add_assign(&skip)?;
            g = self.block_backward(&format!("enc{l}"), block, &gp, &mut grads)?;
        }
        // reorder to canonical layout
        let mut ordered = UNetParams::new();
        for name in self.params.names() {
            let t = grads
                .tensors
                .shift_remove(name)
                .ok_or_else(|| Error::Config(format!("no gradient for {name}")))?;
            ordered.insert(name, t);
        }
        Ok(ordered)
    }

    /// Dice loss on a batch and its gradient for every parameter.
    pub fn loss_and_grad(&self, x: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<(f64, Vec<f64>, UNetParams<T>)> {
        let cache = self.forward_train(x)?;
        let out = dice_loss_with_grad(&cache.probs, target, smooth)?;
        let grads = self.backward(&cache, &out.grad)?;
        Ok((out.loss, out.per_class, grads))
    }
}

pub(crate) fn check_names<T: Scalar>(config: &UNetConfig, params: &UNetParams<T>) -> Result<()> {
    let expected: Vec<String> = config.tensor_shapes().into_iter().map(|(n, _)| n).collect();
    let missing: Vec<String> = expected
        .iter()
        .filter(|n| !params.tensors.contains_key(n.as_str()))
        .cloned()
        .collect();
    let extra: Vec<String> = params
        .names()
        .filter(|n| !expected.iter().any(|e| e == n))
        .map(str::to_owned)
        .collect();
    if missing.is_empty() && extra.is_empty() {
        Ok(())
    } else {
        Err(Error::NameMismatch { missing, extra })
    }
}

/// End-to-end objective for gradient checks: Dice loss of the network on a
/// fixed batch, as a function of all parameters in canonical order.
pub struct UNetLossOp {
    pub config: UNetConfig,
    pub input: Tensor<f64>,
    pub target: Tensor<f64>,
    pub smooth: f64,
}

impl UNetLossOp {
    fn model(&self, inputs: &[Tensor<f64>]) -> Result<UNet<f64>> {
        let mut params = UNetParams::new();
        for ((name, _), t) in self.config.tensor_shapes().into_iter().zip(inputs) {
            params.insert(name, t.clone());
        }
        UNet::from_params(self.config.clone(), params)
    }
}

impl Differentiable for UNetLossOp {
    fn name(&self) -> String {
        format!(
            "unet(base={},depth={})",
            self.config.base_channels, self.config.depth
        )
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let model = self.model(inputs)?;
        let probs = model.forward(&self.input)?;
        Tensor::new(vec![1], vec![crate::loss::dice_loss(&probs, &self.target, self.smooth)?])
    }

    fn adjoint(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let model = self.model(inputs)?;
        let (_, _, grads) = model.loss_and_grad(&self.input, &self.target, self.smooth)?;
        Ok(grads.iter().map(|(_, g)| g.scale(grad_out.data()[0])).collect())
    }
}
