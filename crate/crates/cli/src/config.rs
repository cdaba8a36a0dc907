//! Experiment configuration: one JSON document with `data`, `model`,
//! `train`, `selection`, `output_dir` and `seed` sections.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tissueseg::phantom::PhantomSpec;
use tissueseg::seed::derive_seed;
use tissueseg::selection::CandidateSubset;
use tissueseg::split::{SplitManifest, SplitSizes};
use tissueseg::train::TrainConfig;
use tissueseg::unet::UNetConfig;
use tissueseg::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: Option<UNetConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub selection: Option<SelectionSection>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Phantom families generated by `phantom-gen`.
    pub phantoms: Vec<PhantomFamily>,
    /// Random role sizes for the manifest written by `phantom-gen`.
    pub split_sizes: Option<SplitSizes>,
    /// Dataset manifest (as written by `phantom-gen`).
    pub manifest: Option<PathBuf>,
    pub volumes: Vec<VolumeEntry>,
    pub split: Option<SplitManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomFamily {
    /// Volume ids are `<prefix><index>`, index zero-padded to two digits.
    pub prefix: String,
    pub count: usize,
    #[serde(default)]
    pub spec: PhantomSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeEntry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CandidateSpec {
    Explicit(Vec<CandidateSubset>),
    /// Seed derived from the global seed.
    Sampled { count: usize, size: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub candidates: Option<CandidateSpec>,
    /// Evaluation volumes for `select`; defaults to the split's test ids.
    pub eval_ids: Vec<String>,
    /// Labeled base training set for `suggest`; defaults to the split's
    /// train ids.
    pub base_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    /// Probe volumes for `suggest`; defaults to the split's test ids.
    pub probe_ids: Vec<String>,
    pub fixed_epochs: usize,
    pub k: Option<usize>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        SelectionSection {
            candidates: None,
            eval_ids: Vec::new(),
            base_ids: Vec::new(),
            unlabeled_ids: Vec::new(),
            probe_ids: Vec::new(),
            fixed_epochs: tissueseg::selection::DEFAULT_FIXED_EPOCHS,
            k: None,
        }
    }
}

/// Written next to generated volumes; paths are relative to its directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub volumes: Vec<VolumeEntry>,
    pub split: SplitManifest,
}

/// A loaded configuration with the global seed applied.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub seed: u64,
    /// Directory relative paths in the config resolve against.
    pub base_dir: PathBuf,
    pub hash: String,
}

impl Resolved {
    pub fn load(path: Option<&Path>, seed_override: Option<u64>) -> Result<Self> {
        let (config, base_dir) = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                let config: ExperimentConfig = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (config, dir)
            }
            None => (ExperimentConfig::default(), PathBuf::new()),
        };
        Self::from_config(config, base_dir, seed_override)
    }

    /// Apply the seed rule: the global seed (flag, then config, then 0)
    /// determines the model and training seeds as
    /// `derive_seed(seed, "model")` and `derive_seed(seed, "train")`.
    pub fn from_config(mut config: ExperimentConfig, base_dir: PathBuf, seed_override: Option<u64>) -> Result<Self> {
        let seed = seed_override.or(config.seed).unwrap_or(0);
        config.seed = Some(seed);
        if let Some(m) = config.model.as_mut() {
            m.seed = derive_seed(seed, "model");
        }
        if let Some(t) = config.train.as_mut() {
            t.seed = derive_seed(seed, "train");
        }
        let hash = config_hash(&config)?;
        Ok(Resolved {
            config,
            seed,
            base_dir,
            hash,
        })
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn model(&self) -> Result<UNetConfig> {
        let m = self.config.model.clone().unwrap_or_else(|| UNetConfig {
            seed: derive_seed(self.seed, "model"),
            ..Default::default()
        });
        m.validate()?;
        Ok(m)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let t = self
            .config
            .train
            .clone()
            .ok_or_else(|| Error::Config("the config has no `train` section".into()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn selection(&self) -> Result<SelectionSection> {
        self.config
            .selection
            .clone()
            .ok_or_else(|| Error::Config("the config has no `selection` section".into()))
    }

    /// Volumes listed in the config plus those of the referenced manifest,
    /// with absolute paths, and the split (config split wins).
    pub fn dataset(&self) -> Result<(Vec<VolumeEntry>, SplitManifest)> {
        let mut volumes = Vec::new();
        let mut split = SplitManifest::default();
        if let Some(m) = &self.config.data.manifest {
            let path = self.path(m);
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
            let manifest: DatasetManifest = serde_json::from_str(&text)?;
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
            for v in manifest.volumes {
                volumes.push(VolumeEntry {
                    id: v.id,
                    image: dir.join(v.image),
                    labels: v.labels.map(|l| dir.join(l)),
                });
            }
            split = manifest.split;
        }
        for v in &self.config.data.volumes {
            volumes.push(VolumeEntry {
                id: v.id.clone(),
                image: self.path(&v.image),
                labels: v.labels.as_ref().map(|l| self.path(l)),
            });
        }
        if let Some(s) = &self.config.data.split {
            split = s.clone();
        }
        let ids: Vec<String> = volumes.iter().map(|v| v.id.clone()).collect();
        split.validate(&ids)?;
        for v in &volumes {
            for p in std::iter::once(&v.image).chain(&v.labels) {
                if !p.exists() {
                    return Err(Error::Config(format!("volume {} refers to missing file {}", v.id, p.display())));
                }
            }
        }
        Ok((volumes, split))
    }
}

pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
