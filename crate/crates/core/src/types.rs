//! Shared domain types and the two primitive similarity functions:
//! box overlap (IoU) and embedding cosine similarity.

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::sync::Arc;

/// Machine-vision task a frame, backend or model belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Object,
    Face,
    Plate,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Object => "object",
            Task::Face => "face",
            Task::Plate => "plate",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object" => Ok(Task::Object),
            "face" => Ok(Task::Face),
            "plate" => Ok(Task::Plate),
            other => Err(Error::InvalidConfig(format!("unknown task {other:?}"))),
        }
    }
}

/// Axis-aligned box in a continuous image coordinate frame, origin top-left.
///
/// Boxes are half-open rectangles; pixel-grid quantization is a backend
/// concern, not a geometry concern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox<T: Scalar = f64> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
}

impl<T: Scalar> BoundingBox<T> {
    /// Validates `x_min < x_max`, `y_min < y_max`, all coordinates finite
    /// and non-negative.
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        let fail = |reason| Err(b.invalid(reason));
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return fail("coordinate is not finite");
        }
        if x_min < T::zero() || y_min < T::zero() {
            return fail("coordinates must be non-negative");
        }
        if x_min >= x_max || y_min >= y_max {
            return fail("box must have positive extent");
        }
        Ok(b)
    }

    fn invalid(&self, reason: &'static str) -> Error {
        Error::InvalidBoundingBox {
            x_min: self.x_min.to_f64_lossy(),
            y_min: self.y_min.to_f64_lossy(),
            x_max: self.x_max.to_f64_lossy(),
            y_max: self.y_max.to_f64_lossy(),
            reason,
        }
    }

    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let dx = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(T::zero());
        let dy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(T::zero());
        dx * dy
    }

    /// Box grown by `fraction` of its own width/height on each side, then
    /// clipped to `[0, width] x [0, height]`.
    pub fn padded_and_clipped(&self, fraction: T, width: T, height: T) -> Self {
        let px = self.width() * fraction;
        let py = self.height() * fraction;
        Self {
            x_min: (self.x_min - px).max(T::zero()),
            y_min: (self.y_min - py).max(T::zero()),
            x_max: (self.x_max + px).min(width),
            y_max: (self.y_max + py).min(height),
        }
    }
}

/// Intersection over union of two valid boxes; 0 when disjoint.
pub fn iou<T: Scalar>(a: &BoundingBox<T>, b: &BoundingBox<T>) -> T {
    let inter = a.intersection_area(b);
    if inter == T::zero() {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// One detector output: a box, its class, and the detector's confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection<T: Scalar = f64> {
    #[serde(flatten)]
    pub bbox: BoundingBox<T>,
    pub class_id: u32,
    pub confidence: T,
}

impl<T: Scalar> Detection<T> {
    pub fn new(bbox: BoundingBox<T>, class_id: u32, confidence: T) -> Result<Self> {
        if !confidence.is_finite() || confidence < T::zero() || confidence > T::one() {
            return Err(Error::InvalidConfidence(confidence.to_f64_lossy()));
        }
        Ok(Self {
            bbox,
            class_id,
            confidence,
        })
    }
}

/// Fixed-length real vector produced by an embedding backend.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T: Scalar = f64>(Vec<T>);

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding);
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn norm(&self) -> T {
        self.0
            .iter()
            .fold(T::zero(), |acc, v| acc + *v * *v)
            .sqrt()
    }
}

/// Cosine similarity of two same-length, nonzero embeddings, clamped to
/// [-1, 1] against floating-point overshoot.
pub fn cosine_similarity<T: Scalar>(a: &EmbeddingVector<T>, b: &EmbeddingVector<T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::EmbeddingDimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroNormEmbedding);
    }
    let dot = a
        .values()
        .iter()
        .zip(b.values())
        .fold(T::zero(), |acc, (x, y)| acc + *x * *y);
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}

/// Character set license-plate strings are drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    chars: Vec<char>,
}

impl Default for Alphabet {
    /// Latin uppercase plus digits.
    fn default() -> Self {
        Self {
            chars: ('A'..='Z').chain('0'..='9').collect(),
        }
    }
}

impl Alphabet {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Self {
        Self {
            chars: chars.into_iter().collect(),
        }
    }

    pub fn contains(&self, c: char) -> bool {
        self.chars.contains(&c)
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Uppercases and drops characters outside the alphabet. Returns the
    /// normalized string and whether anything was changed.
    pub fn normalize(&self, s: &str) -> (String, bool) {
        let mut out = String::with_capacity(s.len());
        let mut changed = false;
        for c in s.chars() {
            let up = c.to_ascii_uppercase();
            if up != c {
                changed = true;
            }
            if self.contains(up) {
                out.push(up);
            } else {
                changed = true;
            }
        }
        (out, changed)
    }
}

/// Recognized (or ground-truth) license-plate text with a confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateString {
    pub chars: String,
    pub confidence: f64,
}

impl PlateString {
    /// Validates every character against `alphabet` and the confidence range.
    pub fn new(chars: impl Into<String>, confidence: f64, alphabet: &Alphabet) -> Result<Self> {
        let chars = chars.into();
        if let Some(bad) = chars.chars().find(|c| !alphabet.contains(*c)) {
            return Err(Error::CharOutsideAlphabet(bad));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidConfidence(confidence));
        }
        Ok(Self { chars, confidence })
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn len(&self) -> usize {
        self.chars.chars().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    Srgb,
    Gray,
}

/// Handle to concrete pixels: either a file on disk or an in-memory raster.
#[derive(Debug, Clone)]
pub enum ImageData {
    Path(PathBuf),
    Blob(Arc<Raster>),
}

/// A reference to one image plus the metadata the pipeline needs without
/// decoding it.
#[derive(Debug, Clone)]
pub struct ImageRef {
    pub data: ImageData,
    pub width: u32,
    pub height: u32,
    pub bit_depth: u8,
    pub colorspace: ColorSpace,
}

impl ImageRef {
    /// Reads dimensions from the file header; 8-bit sRGB assumed.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let (width, height) =
            image::image_dimensions(&path).map_err(|source| Error::ImageIo {
                path: path.clone(),
                source,
            })?;
        Self::validate_dims(width, height)?;
        Ok(Self {
            data: ImageData::Path(path),
            width,
            height,
            bit_depth: 8,
            colorspace: ColorSpace::Srgb,
        })
    }

    pub fn from_path_with_dims(path: impl Into<PathBuf>, width: u32, height: u32) -> Result<Self> {
        Self::validate_dims(width, height)?;
        Ok(Self {
            data: ImageData::Path(path.into()),
            width,
            height,
            bit_depth: 8,
            colorspace: ColorSpace::Srgb,
        })
    }

    pub fn from_raster(raster: Raster) -> Self {
        let colorspace = if raster.channels() == 1 {
            ColorSpace::Gray
        } else {
            ColorSpace::Srgb
        };
        Self {
            width: raster.width(),
            height: raster.height(),
            bit_depth: 8,
            colorspace,
            data: ImageData::Blob(Arc::new(raster)),
        }
    }

    fn validate_dims(width: u32, height: u32) -> Result<()> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImageDimensions(width, height));
        }
        Ok(())
    }

    pub fn path(&self) -> Option<&std::path::Path> {
        match &self.data {
            ImageData::Path(p) => Some(p),
            ImageData::Blob(_) => None,
        }
    }

    /// Decodes (or clones) the pixels and cross-checks dimensions against
    /// the declared metadata.
    pub fn load(&self) -> Result<Raster> {
        let raster = match &self.data {
            ImageData::Path(p) => Raster::load(p)?,
            ImageData::Blob(r) => (**r).clone(),
        };
        if raster.width() != self.width || raster.height() != self.height {
            return Err(Error::MetadataMismatch {
                expected_width: self.width,
                expected_height: self.height,
                got_width: raster.width(),
                got_height: raster.height(),
            });
        }
        Ok(raster)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_identity() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let b = bb(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_half_overlap() {
        // intersection 50, union 150
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let b = bb(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 10.0).is_err());
        assert!(BoundingBox::new(5.0, 5.0, 5.0, 5.0).is_err());
        assert!(BoundingBox::new(-1.0, 0.0, 10.0, 10.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 10.0, 10.0).is_err());
    }

    #[test]
    fn cosine_self_similarity() {
        let v = EmbeddingVector::new(vec![0.3f64, -1.2, 4.5]).unwrap();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_orthogonal() {
        let a = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let b = EmbeddingVector::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_45_degrees() {
        let a = EmbeddingVector::new(vec![1.0, 1.0]).unwrap();
        let b = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let got = cosine_similarity(&a, &b).unwrap();
        assert!((got - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_rejected() {
        let a = EmbeddingVector::new(vec![0.0, 0.0]).unwrap();
        let b = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            cosine_similarity(&a, &b),
            Err(Error::ZeroNormEmbedding)
        ));
    }

    #[test]
    fn cosine_length_mismatch_rejected() {
        let a = EmbeddingVector::new(vec![1.0]).unwrap();
        let b = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        assert!(cosine_similarity(&a, &b).is_err());
    }

    #[test]
    fn plate_string_alphabet_checked() {
        let alpha = Alphabet::default();
        assert!(PlateString::new("AB123", 1.0, &alpha).is_ok());
        assert!(PlateString::new("ab123", 1.0, &alpha).is_err());
        assert!(PlateString::new("AB-12", 1.0, &alpha).is_err());
        assert!(PlateString::new("", 0.0, &alpha).is_ok());
    }

    #[test]
    fn alphabet_normalize_uppercases_and_drops() {
        let alpha = Alphabet::default();
        let (s, changed) = alpha.normalize("ab-12");
        assert_eq!(s, "AB12");
        assert!(changed);
        let (s, changed) = alpha.normalize("AB12");
        assert_eq!(s, "AB12");
        assert!(!changed);
    }

    #[test]
    fn detection_confidence_range_checked() {
        let b = bb(0.0, 0.0, 1.0, 1.0);
        assert!(Detection::new(b, 0, 1.5).is_err());
        assert!(Detection::new(b, 0, -0.1).is_err());
        assert!(Detection::new(b, 0, 0.5).is_ok());
    }
}
