//! Core library for a desk-scale multi-task human parser: shared backbone,
//! segmentation / keypoint / dense-surface branches, losses, metrics,
//! synthetic data, and training.

pub mod backbone;
pub mod dense;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod palette;
pub mod pose;
pub mod seg;
pub mod synth;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    default_config, validate_sample, AnnotatedSample, DenseLossForm, DensePoseMap, ModelConfig,
    SegMask, Skeleton, Variant,
};
