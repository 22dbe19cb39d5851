//! Cross-domain exemplar detection.
//!
//! Real-image features are mapped into the feature space of clean rendered
//! views by a learned adaptation, then compared against a gallery of rendered
//! exemplars whose per-exemplar score calibration is folded into a single
//! scoring matrix. The crate also ships a deterministic procedural benchmark
//! (cuboid "CAD" models, a software rasterizer, composited training pairs and
//! cluttered test scenes) and the evaluation protocols used to measure
//! retrieval accuracy, detection AP and azimuth error.
//!
//! # Modules
//! - [`featspace`]: images, feature maps, grid/HOG extractors, pooling.
//! - [`simkit`]: similarity functions, gallery scoring, the folded gallery.
//! - [`adapt`]: adaptation families, squared-cosine loss, gradients, SGD.
//! - [`calib`]: random-patch statistics and the per-exemplar affine fit.
//! - [`detect`]: proposals, aspect-ratio gate, NMS, the per-image pipeline.
//! - [`synthgen`]: procedural models, rendering, compositing, scenes.
//! - [`evalkit`]: retrieval accuracy, VOC matching/AP, pose error, ablations.
//! - [`harness`]: configuration, file formats and the end-to-end commands.

pub mod adapt;
pub mod calib;
pub mod detect;
mod error;
pub mod evalkit;
pub mod featspace;
pub mod harness;
pub mod seed;
pub mod simkit;
pub mod synthgen;

pub use adapt::{AdaptationModel, Shape3, TrainConfig, TrainingPair, TransformFamily};
pub use calib::{CalibrationParams, PatchScoreStats};
pub use detect::{BBox, DetectConfig, Detection};
pub use error::{Error, ExitCode, Result};
pub use featspace::{FeatureMap, FeatureVector, GrayImage};
pub use simkit::{ExemplarMeta, FoldedGallery, Gallery, Similarity};
pub use synthgen::{ProcModel, SynthScene, ViewParams};
