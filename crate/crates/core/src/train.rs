//! Mini-batch training with Adam and patience-based early stopping on the
//! validation mean tissue DSC.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::one_hot;
use crate::patch::{image_batch, tile_patches, Patch, PATCH};
use crate::predict::{predict_patch_labels, Preprocess};
use crate::seed::derive_seed;
use crate::tensor::{Scalar, Tensor};
use crate::unet::{build, UNet, UNetConfig, UNetParams};
use crate::volume::{LabeledVolume, Tissue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Fraction of training volumes held out for early stopping.
    pub validation_fraction: f64,
    /// Run exactly `max_epochs` epochs with no early stopping.
    pub fixed_epochs: bool,
    /// Minimum absolute gain over the best metric that counts as improvement.
    pub min_delta: f64,
    /// Soft-Dice smoothing constant.
    pub smooth: f64,
    /// Skip training patches whose labels are all background.
    pub drop_background_patches: bool,
    pub preprocess: Preprocess,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 500,
            patience: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            validation_fraction: 0.2,
            fixed_epochs: false,
            min_delta: 1e-5,
            smooth: crate::loss::DEFAULT_SMOOTH,
            drop_background_patches: true,
            preprocess: Preprocess::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !self.fixed_epochs {
            if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
                return bad(format!(
                    "validation_fraction {} must lie in (0, 1) when early stopping is enabled",
                    self.validation_fraction
                ));
            }
            if self.patience >= self.max_epochs {
                return bad(format!(
                    "patience {} must be smaller than max_epochs {}",
                    self.patience, self.max_epochs
                ));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: UNetParams<T>,
    pub v: UNetParams<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &UNetParams<T>) -> Self {
        let mut m = UNetParams::new();
        for (name, p) in params.iter() {
            m.insert(name.clone(), p.zeros_like());
        }
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

pub fn adam_step<T: Scalar>(
    params: &mut UNetParams<T>,
    grads: &UNetParams<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let eps = T::from_f64_lossy(cfg.epsilon);
    for (((name, p), (gname, g)), ((_, m), (_, v))) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if name != gname || p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("parameter {name} {:?} vs gradient {gname} {:?}", p.shape(), g.shape()),
            ));
        }
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Stops once `patience` consecutive epochs fail to beat the best metric by
/// at least `min_delta`.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some(b) => metric > b + self.min_delta,
        };
        if improved {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: self.since_best >= self.patience,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.map(|b| (self.best_epoch, b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    pub val_mean_dsc: Option<f64>,
    /// Mean per-class soft DSC over the epoch's batches (background first).
    pub soft_dsc: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,loss,val_mean_dsc,dsc_bg,dsc_csf,dsc_gm,dsc_wm,seconds";

impl TrainHistory {
    /// Copy with wall-clock times zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainHistory {
        let mut h = self.clone();
        h.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        h
    }

    /// CSV with one row per epoch. Without `timing` the `seconds` column is
    /// `NA`, which keeps the file reproducible byte for byte.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut s = String::from(HISTORY_CSV_HEADER);
        s.push('\n');
        for e in &self.epochs {
            let val = crate::metrics::fmt_opt(e.val_mean_dsc);
            let dsc: Vec<String> = e.soft_dsc.iter().map(f64::to_string).collect();
            let secs = if timing { format!("{:.3}", e.seconds) } else { "NA".into() };
            s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.loss, val, dsc.join(","), secs));
        }
        s
    }
}

/// Mean tissue DSC of argmax predictions on validation patches, with class
/// counts pooled over all patches. A class absent from both prediction and
/// truth scores 1.
pub fn validation_dsc(model: &UNet<f32>, patches: &[&Patch]) -> Result<f64> {
    let preds = predict_patch_labels(model, patches)?;
    let mut tp = [0usize; 3];
    let mut fp = [0usize; 3];
    let mut fneg = [0usize; 3];
    for (pred, patch) in preds.iter().zip(patches) {
        let truth = patch
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config("validation patch without labels".into()))?;
        for (&p, &t) in pred.iter().zip(truth) {
            for (i, tissue) in Tissue::FOREGROUND.iter().enumerate() {
                let c = tissue.id();
                match (p == c, t == c) {
                    (true, true) => tp[i] += 1,
                    (true, false) => fp[i] += 1,
                    (false, true) => fneg[i] += 1,
                    _ => {}
                }
            }
        }
    }
    let dsc: f64 = (0..3)
        .map(|i| {
            let d = 2 * tp[i] + fp[i] + fneg[i];
            if d == 0 {
                1.0
            } else {
                2.0 * tp[i] as f64 / d as f64
            }
        })
        .sum();
    Ok(dsc / 3.0)
}

fn batch_tensors(patches: &[&Patch], classes: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let x = image_batch(patches)?;
    let mut labels = Vec::with_capacity(patches.len() * PATCH * PATCH);
    for p in patches {
        labels.extend_from_slice(
            p.labels
                .as_ref()
                .ok_or_else(|| Error::Config(format!("training patch of {} has no labels", p.volume_id)))?,
        );
    }
    let t = one_hot(&labels, patches.len(), classes, PATCH, PATCH)?;
    Ok((x, t))
}

/// Train with the default validator ([`validation_dsc`] on `val`).
pub fn train(model: UNet<f32>, train_set: &[Patch], val: &[Patch], cfg: &TrainConfig) -> Result<(UNet<f32>, TrainHistory)> {
    let val_refs: Vec<&Patch> = val.iter().collect();
    train_with_validator(model, train_set, cfg, |m, _| {
        if val_refs.is_empty() {
            Ok(None)
        } else {
            validation_dsc(m, &val_refs).map(Some)
        }
    })
}

/// Training loop with a caller-supplied validation metric (higher is
/// better). The validator receives the model after each epoch and the
/// 1-based epoch number.
pub fn train_with_validator<F>(
    mut model: UNet<f32>,
    train_set: &[Patch],
    cfg: &TrainConfig,
    mut validate: F,
) -> Result<(UNet<f32>, TrainHistory)>
where
    F: FnMut(&UNet<f32>, usize) -> Result<Option<f64>>,
{
    cfg.validate()?;
    let usable: Vec<&Patch> = train_set
        .iter()
        .filter(|p| !(cfg.drop_background_patches && p.is_background_only()))
        .collect();
    if usable.is_empty() {
        return Err(Error::Config("no training patches".into()));
    }
    let classes = model.config.num_classes;
    let adam = cfg.adam();
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut history = TrainHistory::default();
    let mut best_params: Option<UNetParams<f32>> = None;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut dsc_sum = vec![0.0; classes];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let patches: Vec<&Patch> = chunk.iter().map(|&i| usable[i]).collect();
            let (x, t) = batch_tensors(&patches, classes)?;
            let (loss, per_class, grads) = model.loss_and_grad(&x, &t, cfg.smooth)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            adam_step(&mut model.params, &grads, &mut state, &adam)?;
            loss_sum += loss;
            dsc_sum.iter_mut().zip(&per_class).for_each(|(a, d)| *a += d);
            batches += 1;
        }
        let val = validate(&model, epoch)?;
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            val_mean_dsc: val,
            soft_dsc: dsc_sum.iter().map(|d| d / batches as f64).collect(),
            seconds: started.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: loss {:.5} val {:?}", loss_sum / batches as f64, val);
        if cfg.fixed_epochs {
            continue;
        }
        let metric = val.ok_or_else(|| Error::Config("early stopping needs a validation metric".into()))?;
        let decision = stopper.update(epoch, metric);
        if decision.improved {
            best_params = Some(model.params.clone());
        }
        if decision.stop {
            history.stopped_early = true;
            break;
        }
    }

    if cfg.fixed_epochs {
        history.best_epoch = history.epochs.last().map(|e| e.epoch);
    } else {
        history.best_epoch = stopper.best().map(|(e, _)| e);
        if let Some(p) = best_params {
            model.params = p;
        }
    }
    Ok((model, history))
}

/// Tile labeled volumes into training patches.
pub fn volume_patches(volumes: &[&LabeledVolume], pre: &Preprocess) -> Result<Vec<Patch>> {
    let mut out = Vec::new();
    for v in volumes {
        let ps = tile_patches(&v.id, &pre.apply(&v.image), &v.labels, pre.slicing_axis)?;
        out.extend(ps.patches);
    }
    Ok(out)
}

/// Split volumes into (train, validation) for early stopping. Validation
/// gets `round(fraction * distinct)` distinct ids, at least one, and at
/// least one distinct id is left for training. Duplicate entries (from
/// sampling with replacement) stay together.
pub fn carve_validation<'a>(
    volumes: &[&'a LabeledVolume],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<&'a LabeledVolume>, Vec<&'a LabeledVolume>)> {
    let mut ids: Vec<&str> = volumes.iter().map(|v| v.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Config(
            "early stopping needs at least two distinct training volumes".into(),
        ));
    }
    let n_val = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_ids = &ids[..n_val];
    let (val, train): (Vec<&LabeledVolume>, Vec<&LabeledVolume>) =
        volumes.iter().partition(|v| val_ids.contains(&v.id.as_str()));
    let mut val_unique = Vec::new();
    for v in val {
        if !val_unique.iter().any(|u: &&LabeledVolume| u.id == v.id) {
            val_unique.push(v);
        }
    }
    Ok((train, val_unique))
}

/// Build a fresh model from `model_cfg` and train it on whole volumes. In
/// early-stopping mode a validation split is carved out by volume.
pub fn fit_volumes(
    model_cfg: &UNetConfig,
    cfg: &TrainConfig,
    volumes: &[&LabeledVolume],
) -> Result<(UNet<f32>, TrainHistory)> {
    cfg.validate()?;
    let model = build::<f32>(model_cfg)?;
    if cfg.fixed_epochs {
        let patches = volume_patches(volumes, &cfg.preprocess)?;
        return train(model, &patches, &[], cfg);
    }
    let (train_vols, val_vols) = carve_validation(volumes, cfg.validation_fraction, derive_seed(cfg.seed, "validation"))?;
    let train_patches = volume_patches(&train_vols, &cfg.preprocess)?;
    let val_patches = volume_patches(&val_vols, &cfg.preprocess)?;
    train(model, &train_patches, &val_patches, cfg)
}
