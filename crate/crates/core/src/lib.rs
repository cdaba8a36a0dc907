//! Volumetric brain-tissue segmentation with a 2D U-Net on 64x64 slice
//! patches: layer primitives with hand-written adjoints, a multi-class soft
//! Dice loss, DSC / Hausdorff / AVD evaluation, and two training-data
//! selection procedures (candidate-subset ranking and suggestive annotation).

pub mod autodiff;
pub mod checkpoint;
pub mod edt;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod patch;
pub mod phantom;
pub mod predict;
pub mod seed;
pub mod selection;
pub mod split;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
pub use metrics::MetricsRecord;
pub use patch::{Patch, PatchSet, TileGeometry};
pub use phantom::PhantomSpec;
pub use predict::Preprocess;
pub use selection::{CandidateSubset, Candidates, SelectionReport};
pub use split::{SplitManifest, SplitSizes};
pub use tensor::{Scalar, Tensor};
pub use train::{TrainConfig, TrainHistory};
pub use unet::{UNet, UNetConfig};
pub use volume::{LabelVolume, LabeledVolume, Tissue, Volume};
