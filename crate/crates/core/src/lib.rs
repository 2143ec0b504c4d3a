//! Detect, attribute and localize GAN-generated image content from directional pixel
//! co-occurrence matrices classified by a small depthwise-separable residual CNN.

pub mod cooccur;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod imagecore;
pub mod localize;
pub mod model;
pub mod nn;
pub mod persist;
pub mod pipeline;
pub mod seed;

pub use cooccur::{feature_tensor, CoocTensor, PairDirection, PairSubset};
pub use dataset::{ManifestRecord, PreprocPolicy, Split, SynthSpec};
pub use error::{Error, Result};
pub use imagecore::{PatchSpec, PixelImage};
pub use model::{ArchConfig, Head, MiniXception};
pub use persist::ModelCheckpoint;
pub use pipeline::{EvalReport, TrainConfig};
pub use nn::Tensor;
