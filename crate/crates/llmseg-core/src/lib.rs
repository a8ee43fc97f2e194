//! Training-free semantic segmentation driven by text supervision.
//!
//! The pipeline turns a list of class names into dense label maps without any
//! segmentation-specific training: a language model proposes subclass names
//! for each class, a frozen vision-language backbone embeds both the prompts
//! and the image patches, and the ensemble stage combines the per-descriptor
//! similarity maps into one score map per class. A dense CRF pass refines the
//! result against image colors.
//!
//! Numeric code is generic over the scalar type through [`Real`]; `f64` is
//! the default used by the shipped binary, `f32` is available for
//! memory-bound batch runs. Concrete aliases for the common types live at
//! the crate root.

pub mod bench;
pub mod config;
pub mod crf;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod llm;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod real;
pub mod subclass;
pub mod synthetic;
pub mod templates;
pub mod tensorfile;

pub use error::{Error, Result};
pub use real::Real;

/// Scalar used by the shipped binary. Tensor files always store `f32`
/// payloads; compute happens at this width.
pub type DefaultScalar = f64;

pub type DescriptorMatrixF32 = ensemble::DescriptorMatrix<f32>;
pub type DescriptorMatrixF64 = ensemble::DescriptorMatrix<f64>;
pub type AttentionMapF32 = ensemble::AttentionMap<f32>;
pub type AttentionMapF64 = ensemble::AttentionMap<f64>;
pub type TokenTextFeaturesF32 = features::TokenTextFeatures<f32>;
pub type TokenTextFeaturesF64 = features::TokenTextFeatures<f64>;
pub type PatchImageFeaturesF32 = features::PatchImageFeatures<f32>;
pub type PatchImageFeaturesF64 = features::PatchImageFeatures<f64>;
pub type UnaryFieldF32 = crf::UnaryField<f32>;
pub type UnaryFieldF64 = crf::UnaryField<f64>;
pub type PipelineF32 = pipeline::Pipeline<f32>;
pub type PipelineF64 = pipeline::Pipeline<f64>;
