//! Keypoint detection, description, matching and registration for vascular
//! images.
//!
//! The toolkit covers the full pipeline:
//!
//! 1. **types** – shared domain types and validation.
//! 2. **geometry** – homography sampling/warping, heatmaps, NMS,
//!    consistency filtering.
//! 3. **nn** – a small f64 reverse-mode autodiff engine the networks are
//!    built on.
//! 4. **network** – the shared encoder with keypoint-augmented fusion and
//!    the detector/descriptor/segmentation heads.
//! 5. **losses** – the five training objectives and their weighted sum.
//! 6. **trainer** – the iterative training loop with progressive keypoint
//!    expansion.
//! 7. **matching** – nearest-neighbor brute-force matching and
//!    least-median-of-squares homography estimation.
//! 8. **metrics** – registration accuracy aggregates (mMAE, mMEE, AUC).
//! 9. **data** – dataset manifests, resizing, augmentation, and a synthetic
//!    vessel-phantom generator.

pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod trainer;
pub mod types;

pub use error::{Error, Result, Validate, Violation};
pub use types::{
    DescriptorMap, FeaturePyramid, FrameSize, Homography, KeypointAnnotation, KeypointEmbedding,
    KeypointSet, MapRole, Provenance, ScalarMap,
};
