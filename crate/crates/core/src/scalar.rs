//! Scalar abstraction for the numeric code paths.

use num_traits::{Float, NumAssign};
use std::fmt::{Debug, Display};

/// Floating-point scalar the geometry, correlation and model stacks are
/// generic over. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    fn to_f64_lossy(self) -> f64;

    /// Little-endian byte encoding used by the model container format.
    fn write_le_bytes(self, out: &mut Vec<u8>);

    /// Inverse of [`Scalar::write_le_bytes`]; `bytes` holds exactly
    /// [`Scalar::BYTE_WIDTH`] bytes.
    fn read_le_bytes(bytes: &[u8]) -> Self;

    const BYTE_WIDTH: usize;

    /// Name recorded in serialized model containers ("f32" / "f64").
    const TYPE_NAME: &'static str;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le_bytes(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    const BYTE_WIDTH: usize = 4;
    const TYPE_NAME: &'static str = "f32";
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le_bytes(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    const BYTE_WIDTH: usize = 8;
    const TYPE_NAME: &'static str = "f64";
}
