//! Non-overlapping 64x64 tiling of volume slices and reassembly of
//! per-patch class probabilities.
//!
//! Each 2D slice taken along the slicing axis is zero padded (intensity 0,
//! label 0) at the high end of both in-plane axes up to a multiple of 64 and
//! cut into a grid of patches. Patch origins are multiples of 64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::reconstruct_labels;
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, Volume};

pub const PATCH: usize = 64;

/// Where patches come from and how to put them back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGeometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Slicing axis (0 = first axis).
    pub axis: usize,
    /// Padded in-plane size `[rows, cols]`.
    pub padded: [usize; 2],
}

impl TileGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], axis: usize) -> Result<Self> {
        if axis > 2 {
            return Err(Error::Config(format!("slicing axis {axis} out of range 0..3")));
        }
        let mut g = TileGeometry {
            dims,
            spacing,
            axis,
            padded: [0, 0],
        };
        let [r, c] = g.plane_dims();
        g.padded = [r.div_ceil(PATCH) * PATCH, c.div_ceil(PATCH) * PATCH];
        Ok(g)
    }

    /// In-plane axes, in order.
    fn plane_axes(&self) -> [usize; 2] {
        match self.axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    pub fn plane_dims(&self) -> [usize; 2] {
        let [a, b] = self.plane_axes();
        [self.dims[a], self.dims[b]]
    }

    pub fn num_slices(&self) -> usize {
        self.dims[self.axis]
    }

    /// `ceil(rows/64) * ceil(cols/64)`.
    pub fn patches_per_slice(&self) -> usize {
        (self.padded[0] / PATCH) * (self.padded[1] / PATCH)
    }

    /// Flat voxel index of `(slice, row, col)`.
    fn voxel(&self, slice: usize, row: usize, col: usize) -> usize {
        let [a, b] = self.plane_axes();
        let mut idx = [0usize; 3];
        idx[self.axis] = slice;
        idx[a] = row;
        idx[b] = col;
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    /// All patch origins `(slice, row, col)` in tiling order.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.num_slices()).flat_map(move |s| {
            (0..self.padded[0] / PATCH)
                .flat_map(move |r| (0..self.padded[1] / PATCH).map(move |c| (s, r * PATCH, c * PATCH)))
        })
    }

    /// Copy one patch out of a flat volume, padding with `fill`.
    fn gather<V: Copy>(&self, src: &[V], fill: V, slice: usize, row: usize, col: usize) -> Vec<V> {
        let [rows, cols] = self.plane_dims();
        let mut out = vec![fill; PATCH * PATCH];
        for r in 0..PATCH.min(rows.saturating_sub(row)) {
            for c in 0..PATCH.min(cols.saturating_sub(col)) {
                out[r * PATCH + c] = src[self.voxel(slice, row + r, col + c)];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub volume_id: String,
    pub slice: usize,
    pub row: usize,
    pub col: usize,
    /// 64x64 intensities.
    pub image: Vec<f32>,
    /// 64x64 labels; absent for unlabeled data.
    pub labels: Option<Vec<u8>>,
}

impl Patch {
    pub fn is_background_only(&self) -> bool {
        self.labels.as_ref().is_some_and(|l| l.iter().all(|&v| v == 0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub geometry: TileGeometry,
    pub patches: Vec<Patch>,
}

fn tile(volume_id: &str, img: &Volume, lab: Option<&LabelVolume>, axis: usize) -> Result<PatchSet> {
    if let Some(l) = lab {
        if l.dims() != img.dims() {
            return Err(Error::shape(
                "tile_patches",
                format!("image dims {:?} vs label dims {:?}", img.dims(), l.dims()),
            ));
        }
    }
    let geometry = TileGeometry::new(img.dims(), img.spacing(), axis)?;
    let patches = geometry
        .origins()
        .map(|(slice, row, col)| Patch {
            volume_id: volume_id.to_string(),
            slice,
            row,
            col,
            image: geometry.gather(img.data(), 0.0, slice, row, col),
            labels: lab.map(|l| geometry.gather(l.labels(), 0, slice, row, col)),
        })
        .collect();
    Ok(PatchSet { geometry, patches })
}

pub fn tile_patches(volume_id: &str, img: &Volume, lab: &LabelVolume, axis: usize) -> Result<PatchSet> {
    tile(volume_id, img, Some(lab), axis)
}

pub fn tile_image(volume_id: &str, img: &Volume, axis: usize) -> Result<PatchSet> {
    tile(volume_id, img, None, axis)
}

/// Stack patch intensities into `[N, 1, 64, 64]`.
pub fn image_batch(patches: &[&Patch]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(patches.len() * PATCH * PATCH);
    for p in patches {
        data.extend_from_slice(&p.image);
    }
    Tensor::new(vec![patches.len(), 1, PATCH, PATCH], data)
}

/// Class probabilities `[K, 64, 64]` for the patch at an origin.
#[derive(Debug, Clone)]
pub struct ProbPatch {
    pub slice: usize,
    pub row: usize,
    pub col: usize,
    pub probs: Vec<f32>,
}

/// Reassembled class probabilities, `[K, D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub classes: usize,
    pub data: Vec<f32>,
}

impl ProbVolume {
    /// Argmax over classes, lowest index on ties.
    pub fn argmax(&self) -> Result<LabelVolume> {
        let n: usize = self.dims.iter().product();
        let t = Tensor::new(vec![1, self.classes, 1, n], self.data.clone())?;
        LabelVolume::new(self.dims, self.spacing, reconstruct_labels(&t)?)
    }
}

/// Place probability patches back into the volume and crop the padding.
/// Every origin of the geometry must be covered.
pub fn untile_probs(geometry: &TileGeometry, classes: usize, patches: &[ProbPatch]) -> Result<ProbVolume> {
    let n: usize = geometry.dims.iter().product();
    let mut data = vec![0.0f32; classes * n];
    let per_row = geometry.padded[1] / PATCH;
    let per_slice = geometry.patches_per_slice();
    let mut covered = vec![false; geometry.num_slices() * per_slice];
    let [rows, cols] = geometry.plane_dims();
    for p in patches {
        if p.probs.len() != classes * PATCH * PATCH {
            return Err(Error::shape(
                "untile",
                format!("patch has {} values, expected {}", p.probs.len(), classes * PATCH * PATCH),
            ));
        }
        if p.slice >= geometry.num_slices()
            || p.row % PATCH != 0
            || p.col % PATCH != 0
            || p.row >= geometry.padded[0]
            || p.col >= geometry.padded[1]
        {
            return Err(Error::shape(
                "untile",
                format!("origin ({}, {}, {}) outside the tiling", p.slice, p.row, p.col),
            ));
        }
        covered[p.slice * per_slice + (p.row / PATCH) * per_row + p.col / PATCH] = true;
        for r in 0..PATCH.min(rows.saturating_sub(p.row)) {
            for c in 0..PATCH.min(cols.saturating_sub(p.col)) {
                let v = geometry.voxel(p.slice, p.row + r, p.col + c);
                for k in 0..classes {
                    data[k * n + v] = p.probs[(k * PATCH + r) * PATCH + c];
                }
            }
        }
    }
    if let Some(missing) = covered.iter().position(|&c| !c) {
        let slice = missing / per_slice;
        let within = missing % per_slice;
        return Err(Error::MissingPatch {
            slice,
            row: (within / per_row) * PATCH,
            col: (within % per_row) * PATCH,
        });
    }
    Ok(ProbVolume {
        dims: geometry.dims,
        spacing: geometry.spacing,
        classes,
        data,
    })
}

/// Reassemble and reconstruct labels by per-voxel argmax.
pub fn untile(geometry: &TileGeometry, classes: usize, patches: &[ProbPatch]) -> Result<LabelVolume> {
    untile_probs(geometry, classes, patches)?.argmax()
}

/// One-hot probabilities of a labeled patch.
pub fn one_hot_patch(p: &Patch, classes: usize) -> Result<ProbPatch> {
    let labels = p
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config(format!("patch of {} has no labels", p.volume_id)))?;
    let mut probs = vec![0.0f32; classes * PATCH * PATCH];
    for (i, &l) in labels.iter().enumerate() {
        probs[l as usize * PATCH * PATCH + i] = 1.0;
    }
    Ok(ProbPatch {
        slice: p.slice,
        row: p.row,
        col: p.col,
        probs,
    })
}
