//! Pluggable adapters for the external machine-vision algorithms the
//! targets are computed against.
//!
//! Real models are reached through the command adapters (the repository
//! ships no network weights); the synthetic oracle provides a fully
//! deterministic stand-in with documented degradation behavior so
//! end-to-end tests are reproducible.

mod command;
mod synthetic;

pub use command::{CommandDetector, CommandEmbedder, CommandPlateReader};
pub use synthetic::{
    detection_scene, face_image, plate_scene, SyntheticDetector, SyntheticEmbedder,
    SyntheticPlateReader,
};

use crate::error::{Error, Result};
use crate::types::{Alphabet, Detection, EmbeddingVector, ImageRef, PlateString, Task};

/// A detector producing boxes clipped to image bounds, deterministic for a
/// fixed model and input bytes.
pub trait DetectorBackend: Send + Sync {
    fn name(&self) -> &str;
    fn task(&self) -> Task;
    /// Declared output confidence range.
    fn confidence_range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
    /// Backends that are not thread-safe are called serially by the
    /// pipeline.
    fn thread_safe(&self) -> bool {
        true
    }
    fn detect(&self, image: &ImageRef) -> Result<Vec<Detection<f64>>>;
}

/// Face-embedding backend with a fixed output dimension.
pub trait FaceEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn thread_safe(&self) -> bool {
        true
    }
    fn embed(&self, image: &ImageRef) -> Result<EmbeddingVector<f64>>;
}

/// License-plate recognizer; outputs stay within its alphabet.
pub trait PlateRecognizer: Send + Sync {
    fn name(&self) -> &str;
    fn alphabet(&self) -> &Alphabet;
    fn thread_safe(&self) -> bool {
        true
    }
    fn recognize(&self, image: &ImageRef) -> Result<PlateString>;
}

/// Embeds and enforces the backend's declared dimension.
pub fn embed_checked(embedder: &dyn FaceEmbedder, image: &ImageRef) -> Result<EmbeddingVector<f64>> {
    let e = embedder.embed(image)?;
    if e.len() != embedder.dim() {
        return Err(Error::EmbeddingDimension {
            expected: embedder.dim(),
            got: e.len(),
        });
    }
    Ok(e)
}
