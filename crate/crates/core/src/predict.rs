//! Inference on patches and whole volumes.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::reconstruct_labels;
use crate::patch::{image_batch, tile_image, untile_probs, Patch, ProbPatch, ProbVolume, PATCH};
use crate::unet::UNet;
use crate::volume::{LabelVolume, Volume};

const INFERENCE_BATCH: usize = 32;

/// How volumes become network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocess {
    pub slicing_axis: usize,
    /// Min-max rescale each volume to `[0, 1]` before tiling.
    pub normalize: bool,
}

impl Preprocess {
    pub fn apply(&self, v: &Volume) -> Volume {
        if self.normalize {
            v.min_max_normalized()
        } else {
            v.clone()
        }
    }
}

/// Class probabilities for each patch, in input order.
pub fn predict_patches(model: &UNet<f32>, patches: &[&Patch]) -> Result<Vec<ProbPatch>> {
    let k = model.config.num_classes;
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(INFERENCE_BATCH) {
        let probs = model.forward(&image_batch(chunk)?)?;
        for (i, p) in chunk.iter().enumerate() {
            debug_assert_eq!(probs.item(i).len(), k * PATCH * PATCH);
            out.push(ProbPatch {
                slice: p.slice,
                row: p.row,
                col: p.col,
                probs: probs.item(i).to_vec(),
            });
        }
    }
    Ok(out)
}

/// Argmax labels for each patch, `64*64` per patch.
pub fn predict_patch_labels(model: &UNet<f32>, patches: &[&Patch]) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(INFERENCE_BATCH) {
        let probs = model.forward(&image_batch(chunk)?)?;
        let labels = reconstruct_labels(&probs)?;
        out.extend(labels.chunks(PATCH * PATCH).map(<[u8]>::to_vec));
    }
    Ok(out)
}

pub fn predict_volume_probs(model: &UNet<f32>, volume: &Volume, pre: &Preprocess) -> Result<ProbVolume> {
    let ps = tile_image("", &pre.apply(volume), pre.slicing_axis)?;
    let refs: Vec<&Patch> = ps.patches.iter().collect();
    let probs = predict_patches(model, &refs)?;
    untile_probs(&ps.geometry, model.config.num_classes, &probs)
}

/// Tile, run the network, reassemble and take the per-voxel argmax.
pub fn predict_volume(model: &UNet<f32>, volume: &Volume, pre: &Preprocess) -> Result<LabelVolume> {
    predict_volume_probs(model, volume, pre)?.argmax()
}
