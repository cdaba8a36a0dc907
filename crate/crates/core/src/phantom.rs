//! Synthetic brain phantoms: nested ellipsoids (WM core, GM shell, CSF
//! shell) around the volume centre, with class-mean intensities, Gaussian
//! noise and an optional smooth multiplicative bias field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Semi-axes in voxels, one per dim.
    pub wm_axes: [f64; 3],
    pub gm_axes: [f64; 3],
    pub csf_axes: [f64; 3],
    /// Mean intensity of background, CSF, GM, WM.
    pub means: [f32; 4],
    pub noise_sigma: f64,
    /// Peak deviation of the bias field from 1.
    pub bias_amplitude: f64,
    /// Direction of the linear bias ramp in normalized voxel coordinates.
    pub bias_direction: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [8, 64, 64],
            spacing: [1.0; 3],
            wm_axes: [2.5, 15.0, 17.0],
            gm_axes: [3.5, 22.0, 24.0],
            csf_axes: [4.5, 27.0, 29.0],
            means: [0.0, 0.3, 0.6, 0.9],
            noise_sigma: 0.03,
            bias_amplitude: 0.0,
            bias_direction: [0.0, 0.0, 1.0],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Config(format!("phantom dims {:?} must be positive", self.dims)));
        }
        for i in 0..3 {
            let (w, g, c) = (self.wm_axes[i], self.gm_axes[i], self.csf_axes[i]);
            if !(w > 0.0 && w < g && g < c) {
                return Err(Error::Config(format!(
                    "ellipsoid semi-axes along axis {i} must satisfy 0 < WM < GM < CSF, got {w} / {g} / {c}"
                )));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        if !(self.bias_amplitude >= 0.0) {
            return Err(Error::Config(format!("bias amplitude {} must be >= 0", self.bias_amplitude)));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!("spacing {:?} must be positive", self.spacing)));
        }
        Ok(())
    }

    /// `n` specs with per-volume size jitter and seeds derived from `seed`.
    /// Each axis is scaled by a shared factor in `[0.9, 1.1]`, so nesting
    /// is preserved.
    pub fn cohort(&self, n: usize, seed: u64) -> Vec<PhantomSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut s = self.clone();
                for i in 0..3 {
                    let f: f64 = rng.random_range(0.9..1.1);
                    s.wm_axes[i] *= f;
                    s.gm_axes[i] *= f;
                    s.csf_axes[i] *= f;
                }
                s.seed = rng.random();
                s
            })
            .collect()
    }

    fn centre(&self) -> [f64; 3] {
        self.dims.map(|d| (d as f64 - 1.0) / 2.0)
    }
}

fn inside(p: [f64; 3], centre: [f64; 3], axes: [f64; 3]) -> bool {
    (0..3).map(|i| ((p[i] - centre[i]) / axes[i]).powi(2)).sum::<f64>() <= 1.0
}

/// Label from ellipsoid membership; never depends on the intensity model.
pub fn phantom_labels(spec: &PhantomSpec) -> Result<LabelVolume> {
    spec.validate()?;
    let [d, h, w] = spec.dims;
    let c = spec.centre();
    let mut labels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                labels.push(if inside(p, c, spec.wm_axes) {
                    3
                } else if inside(p, c, spec.gm_axes) {
                    2
                } else if inside(p, c, spec.csf_axes) {
                    1
                } else {
                    0
                });
            }
        }
    }
    LabelVolume::new(spec.dims, spec.spacing, labels)
}

/// Multiplicative field `1 + a * u`, `u` the projection of the position
/// (normalized to `[-1, 1]` per axis) on the unit bias direction.
fn bias_field(spec: &PhantomSpec, z: usize, y: usize, x: usize) -> f64 {
    if spec.bias_amplitude == 0.0 {
        return 1.0;
    }
    let norm = spec.bias_direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 1.0;
    }
    let pos = [z, y, x];
    let u: f64 = (0..3)
        .map(|i| {
            let t = if spec.dims[i] > 1 {
                2.0 * pos[i] as f64 / (spec.dims[i] - 1) as f64 - 1.0
            } else {
                0.0
            };
            t * spec.bias_direction[i] / norm
        })
        .sum();
    1.0 + spec.bias_amplitude * u
}

pub fn phantom_generate(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    let labels = phantom_labels(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let [d, h, w] = spec.dims;
    let mut data = Vec::with_capacity(d * h * w);
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mean = spec.means[labels.labels()[i] as usize] as f64;
                let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(((mean + n) * bias_field(spec, z, y, x)) as f32);
                i += 1;
            }
        }
    }
    Ok((Volume::new(spec.dims, spec.spacing, data)?, labels))
}
