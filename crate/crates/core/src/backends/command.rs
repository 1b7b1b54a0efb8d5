//! Adapters that run an external process per call and parse JSON from its
//! stdout. This is how externally provided real models (YOLO wrappers,
//! embedding servers, plate readers) plug in without shipping weights.
//!
//! Templates are whitespace-tokenized; the `{input}` token is replaced by
//! the path of a PNG materialization of the image. No shell is involved.

use crate::error::{Error, Result};
use crate::types::{Alphabet, Detection, EmbeddingVector, ImageRef, PlateString, Task};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::process::Command;

fn run_template(name: &str, template: &[String], input: &Path) -> Result<String> {
    if template.is_empty() {
        return Err(Error::Backend {
            name: name.to_string(),
            message: "empty command template".into(),
        });
    }
    let substitute = |tok: &String| -> String {
        if tok == "{input}" {
            input.display().to_string()
        } else {
            tok.clone()
        }
    };
    let program = substitute(&template[0]);
    let output = Command::new(&program)
        .args(template[1..].iter().map(substitute))
        .output()
        .map_err(|e| Error::Backend {
            name: name.to_string(),
            message: format!("failed to spawn {program:?}: {e}"),
        })?;
    if !output.status.success() {
        return Err(Error::Backend {
            name: name.to_string(),
            message: format!(
                "{program:?} exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            ),
        });
    }
    String::from_utf8(output.stdout).map_err(|_| Error::Backend {
        name: name.to_string(),
        message: "stdout is not UTF-8".into(),
    })
}

/// Materializes the image as a PNG file the external tool can read.
/// Path-backed PNG refs are passed through untouched.
fn materialize(image: &ImageRef, scratch: &Path) -> Result<PathBuf> {
    if let Some(p) = image.path() {
        if p.extension().and_then(|e| e.to_str()) == Some("png") {
            return Ok(p.to_path_buf());
        }
    }
    let raster = image.load()?;
    let path = scratch.join(format!(
        "backend-input-{}-{}x{}.png",
        std::process::id(),
        raster.width(),
        raster.height()
    ));
    raster.save_png(&path)?;
    Ok(path)
}

fn parse_json<'a, T: Deserialize<'a>>(name: &str, out: &'a str) -> Result<T> {
    serde_json::from_str(out).map_err(|e| Error::Backend {
        name: name.to_string(),
        message: format!("bad JSON on stdout: {e}"),
    })
}

#[derive(Deserialize)]
struct WireDetection {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    class_id: u32,
    confidence: f64,
}

/// Detector over an external command: stdout must be a JSON array of
/// `{x_min, y_min, x_max, y_max, class_id, confidence}` objects in pixel
/// coordinates. Boxes are clipped to image bounds; boxes that collapse
/// under clipping are dropped.
pub struct CommandDetector {
    name: String,
    task: Task,
    template: Vec<String>,
    scratch: PathBuf,
}

impl CommandDetector {
    pub fn new(name: impl Into<String>, task: Task, template: &str) -> Self {
        Self {
            name: name.into(),
            task,
            template: template.split_whitespace().map(str::to_string).collect(),
            scratch: std::env::temp_dir(),
        }
    }
}

impl super::DetectorBackend for CommandDetector {
    fn name(&self) -> &str {
        &self.name
    }

    fn task(&self) -> Task {
        self.task
    }

    fn detect(&self, image: &ImageRef) -> Result<Vec<Detection<f64>>> {
        let input = materialize(image, &self.scratch)?;
        let out = run_template(&self.name, &self.template, &input)?;
        let wire: Vec<WireDetection> = parse_json(&self.name, &out)?;
        let (w, h) = (image.width as f64, image.height as f64);
        let mut dets = Vec::new();
        for d in wire {
            let x0 = d.x_min.clamp(0.0, w);
            let y0 = d.y_min.clamp(0.0, h);
            let x1 = d.x_max.clamp(0.0, w);
            let y1 = d.y_max.clamp(0.0, h);
            if x0 >= x1 || y0 >= y1 {
                continue;
            }
            let bbox = crate::types::BoundingBox::new(x0, y0, x1, y1)?;
            dets.push(Detection::new(bbox, d.class_id, d.confidence.clamp(0.0, 1.0))?);
        }
        Ok(dets)
    }
}

#[derive(Deserialize)]
struct WireEmbedding {
    values: Vec<f64>,
}

/// Embedder over an external command: stdout must be `{"values": [...]}`
/// of exactly the declared dimension.
pub struct CommandEmbedder {
    name: String,
    dim: usize,
    template: Vec<String>,
    scratch: PathBuf,
}

impl CommandEmbedder {
    pub fn new(name: impl Into<String>, dim: usize, template: &str) -> Self {
        Self {
            name: name.into(),
            dim,
            template: template.split_whitespace().map(str::to_string).collect(),
            scratch: std::env::temp_dir(),
        }
    }
}

impl super::FaceEmbedder for CommandEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &ImageRef) -> Result<EmbeddingVector<f64>> {
        let input = materialize(image, &self.scratch)?;
        let out = run_template(&self.name, &self.template, &input)?;
        let wire: WireEmbedding = parse_json(&self.name, &out)?;
        if wire.values.len() != self.dim {
            return Err(Error::EmbeddingDimension {
                expected: self.dim,
                got: wire.values.len(),
            });
        }
        EmbeddingVector::new(wire.values)
    }
}

#[derive(Deserialize)]
struct WirePlate {
    chars: String,
    confidence: f64,
}

/// Plate reader over an external command: stdout must be
/// `{"chars": "...", "confidence": 0..1}`. Output is normalized to the
/// configured alphabet.
pub struct CommandPlateReader {
    name: String,
    alphabet: Alphabet,
    template: Vec<String>,
    scratch: PathBuf,
}

impl CommandPlateReader {
    pub fn new(name: impl Into<String>, alphabet: Alphabet, template: &str) -> Self {
        Self {
            name: name.into(),
            alphabet,
            template: template.split_whitespace().map(str::to_string).collect(),
            scratch: std::env::temp_dir(),
        }
    }
}

impl super::PlateRecognizer for CommandPlateReader {
    fn name(&self) -> &str {
        &self.name
    }

    fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    fn recognize(&self, image: &ImageRef) -> Result<PlateString> {
        let input = materialize(image, &self.scratch)?;
        let out = run_template(&self.name, &self.template, &input)?;
        let wire: WirePlate = parse_json(&self.name, &out)?;
        let (normalized, _) = self.alphabet.normalize(&wire.chars);
        PlateString::new(normalized, wire.confidence.clamp(0.0, 1.0), &self.alphabet)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::DetectorBackend;
    use crate::raster::Raster;

    #[test]
    fn missing_binary_is_an_error() {
        let det = CommandDetector::new("missing", Task::Object, "definitely-not-a-binary-xyz {input}");
        let img = ImageRef::from_raster(Raster::new(8, 8, 3, 0));
        assert!(matches!(det.detect(&img), Err(Error::Backend { .. })));
    }
}
