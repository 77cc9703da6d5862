//! Adversarial intensity normalization for multi-domain 3-D segmentation:
//! phantom data, patch pipeline, U-Net generator and segmenter, domain
//! discriminator, losses, training and evaluation.

pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod inference;
pub mod losses;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use nn::{Discriminator, Generator, NetworksConfig, Segmenter};
pub use pipeline::{Partition, Patch, PatchSet, PipelineConfig};
pub use tensor::{DomainProbabilities, SoftSegmentation, Tensor};
pub use volume::{DatasetManifest, DomainSample, SegmentationMask, Shape, Volume};
