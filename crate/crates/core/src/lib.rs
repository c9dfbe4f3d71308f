//! Class-balanced hierarchical refinement for multi-label recognition of
//! overlapping X-ray style images.

pub mod ablation;
pub mod backbone;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod head;
pub mod ingest;
pub mod loss;
pub mod model;
pub mod nn;
pub mod synthgen;
pub mod trainer;

pub use datamodel::{
    BBox, DatasetManifest, Image, Image8, LabelVector, ManifestEntry, Record, Sample, SplitTag,
    CLASS_NAMES, NUM_CLASSES,
};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};
