//! groundkit: a desk-scale grounded biomedical interpreter.
//!
//! A toy multimodal language model that answers questions about 2D medical
//! images and, when the generated answer carries the reserved `[SEG]` token,
//! simultaneously decodes a segmentation mask prompted by the language
//! embeddings. Ships with the full pipeline: synthetic dataset generation,
//! CT/MRI preprocessing, VQA curation, multi-task training with a composite
//! text + segmentation loss, and a text/segmentation metric suite.

pub mod curation;
pub mod datamodel;
pub mod io;
pub mod metrics;
pub mod model;
pub mod selftest;
pub mod synthgen;
pub mod tensor;
pub mod training;

pub use datamodel::{
    BBox, DatasetManifest, GroundedOutput, ImageSample, Modality, Region, RegionAnnotation,
    Split, TaskKind, VqaSample, SEG_TOKEN,
};
