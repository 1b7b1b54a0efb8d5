//! Machine-vision-aware quality assessment for compressed images and video.
//!
//! The crate measures how lossy compression degrades detection and
//! recognition performance, trains lightweight crop-level CNN quality
//! predictors for those degradations, and benchmarks arbitrary quality
//! metrics against the ground-truth degradation scores via rank/linear
//! correlation.
//!
//! Numeric code is generic over the scalar type through [`Scalar`]
//! (blanket-implemented for `f32` and `f64`); pipeline code defaults to
//! `f64` while the trainable models default to `f32`.

pub mod backends;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod font;
pub mod matching;
pub mod model;
pub mod nn;
pub mod raster;
pub mod recognition;
pub mod scalar;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use types::{
    cosine_similarity, iou, Alphabet, BoundingBox, ColorSpace, Detection, EmbeddingVector,
    ImageRef, PlateString, Task,
};

/// Pipeline scalar: targets, correlations and manifest values.
pub type Real = f64;

/// Default scalar for trainable model weights.
pub type ModelReal = f32;

pub type BoundingBoxF32 = BoundingBox<f32>;
pub type DetectionF32 = Detection<f32>;

/// Schema version stamped into manifests, target files and model containers.
pub const SCHEMA_VERSION: u32 = 1;
