//! Crate-wide error type.

use crate::types::Task;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid bounding box ({x_min}, {y_min}, {x_max}, {y_max}): {reason}")]
    InvalidBoundingBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        reason: &'static str,
    },

    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),

    #[error("embedding contains a non-finite entry")]
    NonFiniteEmbedding,

    #[error("embedding length {got} does not match expected dimension {expected}")]
    EmbeddingDimension { expected: usize, got: usize },

    #[error("zero-norm vector is not a valid embedding")]
    ZeroNormEmbedding,

    #[error("character {0:?} is not in the configured plate alphabet")]
    CharOutsideAlphabet(char),

    #[error("image dimensions {0}x{1} are invalid")]
    InvalidImageDimensions(u32, u32),

    #[error("image {path}: {source}")]
    ImageIo {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: {a_width}x{a_height} vs {b_width}x{b_height}")]
    DimensionMismatch {
        a_width: u32,
        a_height: u32,
        b_width: u32,
        b_height: u32,
    },

    #[error("channel mismatch: {a} vs {b}")]
    ChannelMismatch { a: u8, b: u8 },

    #[error("bit depth mismatch: {a} vs {b}")]
    BitDepthMismatch { a: u8, b: u8 },

    #[error("image metadata declares {expected_width}x{expected_height} but file decodes to {got_width}x{got_height}")]
    MetadataMismatch {
        expected_width: u32,
        expected_height: u32,
        got_width: u32,
        got_height: u32,
    },

    #[error("blob-backed image cannot be written to a manifest")]
    BlobNotPersistable,

    #[error("backend {name}: {message}")]
    Backend { name: String, message: String },

    #[error("encoder {codec} failed (qf {qf}): {diagnostics}")]
    EncoderFailed {
        codec: String,
        qf: i32,
        diagnostics: String,
    },

    #[error("codec spec {name}: {reason}")]
    InvalidCodecSpec { name: String, reason: String },

    #[error("correlation undefined: series {which} is constant")]
    ConstantSeries { which: &'static str },

    #[error("correlation needs at least 3 samples, got {0}")]
    TooFewSamples(usize),

    #[error("series length mismatch: {a} vs {b}")]
    SeriesLengthMismatch { a: usize, b: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("model container is for task {found:?}, expected {expected:?}")]
    ModelTaskMismatch { expected: Task, found: Task },

    #[error("model container holds a {found} model, expected {expected}")]
    ModelKindMismatch {
        expected: &'static str,
        found: String,
    },

    #[error("model container declares input {found_width}x{found_height}, expected {expected_width}x{expected_height}")]
    ModelResolutionMismatch {
        expected_width: u32,
        expected_height: u32,
        found_width: u32,
        found_height: u32,
    },

    #[error("model container schema version {found}, this build reads {expected}")]
    ModelSchemaMismatch { expected: u32, found: u32 },

    #[error("model container scalar type {found:?}, this model uses {expected:?}")]
    ModelScalarMismatch {
        expected: &'static str,
        found: String,
    },

    #[error("malformed model container: {0}")]
    ModelFormat(String),

    #[error("manifest schema version {found}, this build reads {expected}")]
    ManifestSchemaMismatch { expected: u32, found: u32 },

    #[error("malformed manifest line {line}: {message}")]
    ManifestFormat { line: usize, message: String },

    #[error("split fractions ({train}, {val}) sum to more than 1")]
    InvalidSplitFractions { train: f64, val: f64 },

    #[error("corpus of {frames} source frames is too small for non-empty ({train}, {val}) splits")]
    CorpusTooSmall { frames: usize, train: f64, val: f64 },

    #[error("training target {target:?} is incompatible with task {task:?}")]
    TargetTaskMismatch { task: Task, target: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error("{0}")]
    InvalidConfig(String),
}
