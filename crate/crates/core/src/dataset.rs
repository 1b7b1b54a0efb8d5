//! Compression-sweep corpus construction: encoding variants, PSNR-balanced
//! quality grids, auto-labeling, plate dedup, face pair selection, crop
//! extraction, and the JSON-Lines manifest.

use crate::backends::{DetectorBackend, PlateRecognizer};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::recognition::levenshtein;
use crate::types::{Detection, ImageRef, PlateString, Task};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

/// PSNR assigned to identical images (MSE = 0) and the overall cap; keeps
/// the balancing histogram finite.
pub const PSNR_CAP_DB: f64 = 100.0;

// ---------------------------------------------------------------------------
// atomic file IO

static WRITE_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes via a temp file in the same directory plus rename, so partially
/// written outputs never become visible.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    let tmp = path.with_extension(format!(
        "tmp.{}.{}",
        std::process::id(),
        WRITE_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::write(&tmp, bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

// ---------------------------------------------------------------------------
// codecs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    /// Built-in JPEG path; works without external binaries.
    Jpeg,
    /// External encoder run from a command template with `{input}`,
    /// `{output}` and `{qf}` placeholders. When `decode` is absent the
    /// encoded file must be decodable by the built-in image reader.
    External {
        encode: String,
        decode: Option<String>,
        ext: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub name: String,
    pub kind: CodecKind,
    /// Quality-factor grid, ascending.
    pub grid: Vec<i32>,
    /// Inclusive quality range the codec accepts (used by calibration).
    pub qf_range: (i32, i32),
}

impl CodecSpec {
    pub fn jpeg(grid: Vec<i32>) -> Self {
        Self {
            name: "jpeg".into(),
            kind: CodecKind::Jpeg,
            grid,
            qf_range: (1, 100),
        }
    }

    pub fn extension(&self) -> &str {
        match &self.kind {
            CodecKind::Jpeg => "jpg",
            CodecKind::External { ext, .. } => ext,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidCodecSpec {
                name: self.name.clone(),
                reason,
            })
        };
        if self.grid.is_empty() {
            return fail("quality grid is empty".into());
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return fail("quality grid must be strictly ascending".into());
        }
        let (lo, hi) = self.qf_range;
        if lo > hi {
            return fail(format!("quality range ({lo}, {hi}) is inverted"));
        }
        if self.grid.iter().any(|q| *q < lo || *q > hi) {
            return fail("grid value outside quality range".into());
        }
        Ok(())
    }
}

fn run_codec_template(
    codec: &str,
    qf: i32,
    template: &str,
    input: &Path,
    output: &Path,
) -> Result<()> {
    let tokens: Vec<String> = template
        .split_whitespace()
        .map(|tok| match tok {
            "{input}" => input.display().to_string(),
            "{output}" => output.display().to_string(),
            "{qf}" => qf.to_string(),
            other => other.to_string(),
        })
        .collect();
    if tokens.is_empty() {
        return Err(Error::EncoderFailed {
            codec: codec.into(),
            qf,
            diagnostics: "empty command template".into(),
        });
    }
    let out = Command::new(&tokens[0])
        .args(&tokens[1..])
        .output()
        .map_err(|e| Error::EncoderFailed {
            codec: codec.into(),
            qf,
            diagnostics: format!("failed to spawn {:?}: {e}", tokens[0]),
        })?;
    if !out.status.success() {
        return Err(Error::EncoderFailed {
            codec: codec.into(),
            qf,
            diagnostics: format!(
                "{:?} exited with {}: {}",
                tokens[0],
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ),
        });
    }
    if !output.exists() {
        return Err(Error::EncoderFailed {
            codec: codec.into(),
            qf,
            diagnostics: format!("template produced no file at {}", output.display()),
        });
    }
    Ok(())
}

/// Encodes one variant at `out_path` and returns a reference to the
/// decodable artifact (for external codecs with a decode step, a PNG next
/// to the encoded file). The decoded variant must keep the source
/// dimensions.
pub fn encode_variant(
    image: &ImageRef,
    codec: &CodecSpec,
    qf: i32,
    out_path: &Path,
) -> Result<ImageRef> {
    codec.validate()?;
    let (lo, hi) = codec.qf_range;
    if qf < lo || qf > hi {
        return Err(Error::InvalidCodecSpec {
            name: codec.name.clone(),
            reason: format!("qf {qf} outside range ({lo}, {hi})"),
        });
    }
    match &codec.kind {
        CodecKind::Jpeg => {
            let raster = image.load()?;
            let bytes = raster.encode_jpeg(qf.clamp(1, 100) as u8)?;
            atomic_write(out_path, &bytes)?;
            let decoded = Raster::decode(&bytes)?;
            if decoded.width() != image.width || decoded.height() != image.height {
                return Err(Error::EncoderFailed {
                    codec: codec.name.clone(),
                    qf,
                    diagnostics: "decoded dimensions differ from source".into(),
                });
            }
            ImageRef::from_path_with_dims(out_path, image.width, image.height)
        }
        CodecKind::External { encode, decode, .. } => {
            // materialize the source as PNG for the external tool
            let src_png = match image.path() {
                Some(p) if p.extension().and_then(|e| e.to_str()) == Some("png") => {
                    p.to_path_buf()
                }
                _ => {
                    let tmp = out_path.with_extension("src.png");
                    image.load()?.save_png(&tmp)?;
                    tmp
                }
            };
            if let Some(parent) = out_path.parent() {
                std::fs::create_dir_all(parent).map_err(|source| Error::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            run_codec_template(&codec.name, qf, encode, &src_png, out_path)?;
            let final_path = if let Some(decode_tpl) = decode {
                let decoded_path = out_path.with_extension("decoded.png");
                run_codec_template(&codec.name, qf, decode_tpl, out_path, &decoded_path)?;
                decoded_path
            } else {
                out_path.to_path_buf()
            };
            let variant = ImageRef::open(&final_path)?;
            if variant.width != image.width || variant.height != image.height {
                return Err(Error::EncoderFailed {
                    codec: codec.name.clone(),
                    qf,
                    diagnostics: format!(
                        "variant is {}x{}, source is {}x{}",
                        variant.width, variant.height, image.width, image.height
                    ),
                });
            }
            Ok(variant)
        }
    }
}

/// PSNR in dB over all channels; identical images return the 100 dB cap.
pub fn compute_psnr(reference: &ImageRef, distorted: &ImageRef) -> Result<f64> {
    if reference.bit_depth != distorted.bit_depth {
        return Err(Error::BitDepthMismatch {
            a: reference.bit_depth,
            b: distorted.bit_depth,
        });
    }
    if reference.width != distorted.width || reference.height != distorted.height {
        return Err(Error::DimensionMismatch {
            a_width: reference.width,
            a_height: reference.height,
            b_width: distorted.width,
            b_height: distorted.height,
        });
    }
    let a = reference.load()?;
    let b = distorted.load()?;
    psnr_from_rasters(&a, &b, reference.bit_depth)
}

pub fn psnr_from_rasters(a: &Raster, b: &Raster, bit_depth: u8) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    let max = (2f64.powi(bit_depth as i32) - 1.0).powi(2);
    Ok((10.0 * (max / mse).log10()).min(PSNR_CAP_DB))
}

// ---------------------------------------------------------------------------
// quality-grid calibration

/// Binned PSNR distribution used to balance quality grids across codecs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsnrHistogram {
    /// Bin edges, ascending; `weights.len() + 1` entries.
    pub edges: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PsnrHistogram {
    pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
        (0..=bins)
            .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
            .collect()
    }

    pub fn from_samples(samples: &[f64], edges: Vec<f64>) -> Self {
        assert!(edges.len() >= 2, "need at least one bin");
        let mut weights = vec![0.0; edges.len() - 1];
        for &s in samples {
            // clamp out-of-range samples into the end bins
            let mut bin = weights.len() - 1;
            for i in 0..weights.len() {
                if s < edges[i + 1] || i == weights.len() - 1 {
                    bin = i;
                    break;
                }
            }
            weights[bin] += 1.0;
        }
        Self { edges, weights }
    }

    fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        if total == 0.0 {
            return vec![0.0; self.weights.len()];
        }
        self.weights.iter().map(|w| w / total).collect()
    }

    /// 1-D earth-mover distance: integral of |CDF difference| over bins.
    /// Both histograms must share edges.
    pub fn emd(&self, other: &PsnrHistogram) -> f64 {
        assert_eq!(self.edges, other.edges, "histograms must share edges");
        let a = self.normalized();
        let b = other.normalized();
        let mut cdf_diff = 0.0;
        let mut total = 0.0;
        for i in 0..a.len() {
            cdf_diff += a[i] - b[i];
            total += cdf_diff.abs() * (self.edges[i + 1] - self.edges[i]);
        }
        total
    }
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub grid: Vec<i32>,
    pub distance: f64,
    pub warnings: Vec<String>,
}

/// Coordinate descent over the codec's quality range, one grid slot at a
/// time, minimizing the earth-mover distance between the grid's measured
/// PSNR histogram and the target. Moves only on strict improvement, so a
/// grid already matching its own histogram is a fixed point.
pub fn calibrate_quality_grid(
    probe: &mut dyn FnMut(usize, i32) -> Result<f64>,
    corpus_len: usize,
    candidates: &[i32],
    initial_grid: &[i32],
    target: &PsnrHistogram,
) -> Result<Calibration> {
    if corpus_len == 0 {
        return Err(Error::EmptyInput("calibration corpus"));
    }
    if initial_grid.is_empty() {
        return Err(Error::EmptyInput("initial quality grid"));
    }
    let mut cache: HashMap<(usize, i32), f64> = HashMap::new();
    let measure = |grid: &[i32], cache: &mut HashMap<(usize, i32), f64>,
                       probe: &mut dyn FnMut(usize, i32) -> Result<f64>|
     -> Result<f64> {
        let mut samples = Vec::with_capacity(corpus_len * grid.len());
        for &qf in grid {
            for idx in 0..corpus_len {
                let psnr = match cache.get(&(idx, qf)) {
                    Some(v) => *v,
                    None => {
                        let v = probe(idx, qf)?;
                        cache.insert((idx, qf), v);
                        v
                    }
                };
                samples.push(psnr);
            }
        }
        Ok(PsnrHistogram::from_samples(&samples, target.edges.clone()).emd(target))
    };

    let mut grid = initial_grid.to_vec();
    let mut best = measure(&grid, &mut cache, probe)?;
    loop {
        let mut improved = false;
        for pos in 0..grid.len() {
            let original = grid[pos];
            let mut best_here = (original, best);
            for &cand in candidates {
                if cand == original {
                    continue;
                }
                grid[pos] = cand;
                let d = measure(&grid, &mut cache, probe)?;
                if d + 1e-12 < best_here.1 {
                    best_here = (cand, d);
                }
            }
            grid[pos] = best_here.0;
            if best_here.1 + 1e-12 < best {
                best = best_here.1;
                improved = true;
            } else {
                best = best.min(best_here.1);
            }
        }
        if !improved {
            break;
        }
    }
    grid.sort_unstable();
    let mut warnings = Vec::new();
    if best > 1e-9 {
        warnings.push(format!(
            "codec cannot match target distribution exactly; residual earth-mover distance {best:.4}"
        ));
    }
    Ok(Calibration {
        grid,
        distance: best,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// labeled frames

#[derive(Debug, Clone)]
pub struct LabeledVariant {
    pub codec: String,
    pub qf: i32,
    pub image: ImageRef,
    pub psnr_db: f64,
}

/// One source image, its GT, and its compressed variants.
#[derive(Debug, Clone)]
pub struct LabeledFrame {
    pub source_id: String,
    pub source: ImageRef,
    pub gt: Vec<Detection<f64>>,
    /// Per-plate GT strings aligned with `gt` (plate task only).
    pub plate_strings: Vec<PlateString>,
    pub variants: Vec<LabeledVariant>,
}

/// Selects frames with at least one confident detection, spaced at least
/// `min_gap` frame indices apart; detections below the threshold are
/// dropped from GT. Returns `(frame_index, kept_detections)`.
pub fn autolabel_indices(
    frames: &[ImageRef],
    backend: &dyn DetectorBackend,
    conf_threshold: f64,
    min_gap: usize,
) -> Result<Vec<(usize, Vec<Detection<f64>>)>> {
    let mut selected: Vec<(usize, Vec<Detection<f64>>)> = Vec::new();
    let mut last_kept: Option<usize> = None;
    for (idx, frame) in frames.iter().enumerate() {
        if let Some(last) = last_kept {
            if idx - last < min_gap {
                continue;
            }
        }
        let kept: Vec<Detection<f64>> = backend
            .detect(frame)?
            .into_iter()
            .filter(|d| d.confidence >= conf_threshold)
            .collect();
        if kept.is_empty() {
            continue;
        }
        selected.push((idx, kept));
        last_kept = Some(idx);
    }
    Ok(selected)
}

/// [`autolabel_indices`] wrapped into [`LabeledFrame`]s (no variants yet).
pub fn autolabel_frames(
    frames: &[ImageRef],
    backend: &dyn DetectorBackend,
    conf_threshold: f64,
    min_gap: usize,
) -> Result<Vec<LabeledFrame>> {
    Ok(autolabel_indices(frames, backend, conf_threshold, min_gap)?
        .into_iter()
        .map(|(idx, gt)| LabeledFrame {
            source_id: format!("frame_{idx:05}"),
            source: frames[idx].clone(),
            gt,
            plate_strings: Vec::new(),
            variants: Vec::new(),
        })
        .collect())
}

/// Pixel rectangle covering a continuous box after padding and clipping.
pub fn crop_rect(
    bbox: &crate::types::BoundingBox<f64>,
    padding_fraction: f64,
    width: u32,
    height: u32,
) -> (u32, u32, u32, u32) {
    let padded = bbox.padded_and_clipped(padding_fraction, width as f64, height as f64);
    let x0 = padded.x_min.floor().max(0.0) as u32;
    let y0 = padded.y_min.floor().max(0.0) as u32;
    let x1 = (padded.x_max.ceil() as u32).min(width).max(x0 + 1);
    let y1 = (padded.y_max.ceil() as u32).min(height).max(y0 + 1);
    (x0, y0, x1, y1)
}

/// Runs the recognizer over each frame's plate crops and keeps frames whose
/// plates are all fully recognized (confidence 1.0) and whose strings are
/// farther than `max_similarity_distance` (Levenshtein) from every
/// previously kept plate. Returns `(frame_index, recognized_strings)`.
pub fn dedup_plate_indices(
    frames: &[(ImageRef, Vec<Detection<f64>>)],
    recognizer: &dyn PlateRecognizer,
    max_similarity_distance: usize,
) -> Result<Vec<(usize, Vec<PlateString>)>> {
    let mut kept: Vec<(usize, Vec<PlateString>)> = Vec::new();
    let mut kept_strings: Vec<String> = Vec::new();
    'frames: for (idx, (source, boxes)) in frames.iter().enumerate() {
        let raster = source.load()?;
        let mut strings = Vec::with_capacity(boxes.len());
        for det in boxes {
            let (x0, y0, x1, y1) = crop_rect(&det.bbox, 0.0, source.width, source.height);
            let crop = raster.crop(x0, y0, x1, y1);
            let read = recognizer.recognize(&ImageRef::from_raster(crop))?;
            if read.confidence < 1.0 || read.is_empty() {
                continue 'frames;
            }
            strings.push(read);
        }
        if strings.is_empty() {
            continue;
        }
        let too_close = strings.iter().any(|s| {
            kept_strings
                .iter()
                .any(|k| levenshtein(&s.chars, k) <= max_similarity_distance)
        });
        if too_close {
            continue;
        }
        kept_strings.extend(strings.iter().map(|s| s.chars.clone()));
        kept.push((idx, strings));
    }
    Ok(kept)
}

pub fn dedup_plate_frames(
    frames: Vec<LabeledFrame>,
    recognizer: &dyn PlateRecognizer,
    max_similarity_distance: usize,
) -> Result<Vec<LabeledFrame>> {
    let inputs: Vec<(ImageRef, Vec<Detection<f64>>)> = frames
        .iter()
        .map(|f| (f.source.clone(), f.gt.clone()))
        .collect();
    let kept = dedup_plate_indices(&inputs, recognizer, max_similarity_distance)?;
    Ok(kept
        .into_iter()
        .map(|(idx, strings)| {
            let mut frame = frames[idx].clone();
            frame.plate_strings = strings;
            frame
        })
        .collect())
}

// ---------------------------------------------------------------------------
// face pairs

#[derive(Debug, Clone)]
pub struct FacePair {
    pub person: String,
    pub database: ImageRef,
    pub database_box: Detection<f64>,
    pub query: ImageRef,
    pub query_box: Detection<f64>,
}

#[derive(Debug, Clone)]
pub struct FacePairSelection {
    pub pairs: Vec<FacePair>,
    /// Persons skipped for having fewer than two usable images.
    pub skipped_persons: usize,
}

fn image_sort_key(image: &ImageRef, index: usize) -> String {
    match image.path() {
        Some(p) => p.display().to_string(),
        None => format!("blob-{index:08}"),
    }
}

/// For each person with at least two usable images, picks the image with
/// the highest face-detection confidence as the database entry (ties break
/// to the lexicographically lower path) and a seeded-random other image as
/// the query.
pub fn select_face_pairs(
    person_images: &BTreeMap<String, Vec<ImageRef>>,
    detector: &dyn DetectorBackend,
    seed: u64,
) -> Result<FacePairSelection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for (person, images) in person_images {
        // best face per image; images without a face are unusable
        let mut candidates: Vec<(usize, Detection<f64>)> = Vec::new();
        for (i, image) in images.iter().enumerate() {
            let best = detector
                .detect(image)?
                .into_iter()
                .max_by(|a, b| a.confidence.partial_cmp(&b.confidence).expect("finite"));
            if let Some(det) = best {
                candidates.push((i, det));
            }
        }
        if candidates.len() < 2 {
            skipped += 1;
            continue;
        }
        let db_pos = candidates
            .iter()
            .enumerate()
            .max_by(|(_, (ia, a)), (_, (ib, b))| {
                a.confidence
                    .partial_cmp(&b.confidence)
                    .expect("finite")
                    .then_with(|| {
                        // lower lexicographic path wins on ties
                        image_sort_key(&images[*ib], *ib)
                            .cmp(&image_sort_key(&images[*ia], *ia))
                    })
            })
            .map(|(pos, _)| pos)
            .expect("non-empty candidates");
        let (db_idx, db_box) = candidates[db_pos].clone();
        let rest: Vec<(usize, Detection<f64>)> = candidates
            .into_iter()
            .filter(|(i, _)| *i != db_idx)
            .collect();
        let (q_idx, q_box) = rest[rng.gen_range(0..rest.len())].clone();
        pairs.push(FacePair {
            person: person.clone(),
            database: images[db_idx].clone(),
            database_box: db_box,
            query: images[q_idx].clone(),
            query_box: q_box,
        });
    }
    Ok(FacePairSelection {
        pairs,
        skipped_persons: skipped,
    })
}

// ---------------------------------------------------------------------------
// crops

#[derive(Debug, Clone)]
pub struct VariantCrop {
    pub codec: String,
    pub qf: i32,
    pub crop: Raster,
}

#[derive(Debug, Clone)]
pub struct ObjectCrops {
    pub object_id: String,
    pub ref_crop: Raster,
    pub variant_crops: Vec<VariantCrop>,
    /// Set when the padded box hit an image border and was clipped.
    pub clipped: bool,
}

/// Extracts one crop per GT object from the source frame and the identical
/// pixel window from every variant: compression never moves the crop
/// geometry.
pub fn extract_crops(frame: &LabeledFrame, padding_fraction: f64) -> Result<Vec<ObjectCrops>> {
    let source = frame.source.load()?;
    let variants: Vec<(String, i32, Raster)> = frame
        .variants
        .iter()
        .map(|v| Ok((v.codec.clone(), v.qf, v.image.load()?)))
        .collect::<Result<_>>()?;
    let (w, h) = (frame.source.width, frame.source.height);
    let mut out = Vec::with_capacity(frame.gt.len());
    for (i, det) in frame.gt.iter().enumerate() {
        let padded = det
            .bbox
            .padded_and_clipped(padding_fraction, w as f64, h as f64);
        let unclipped_width = det.bbox.width() * (1.0 + 2.0 * padding_fraction);
        let unclipped_height = det.bbox.height() * (1.0 + 2.0 * padding_fraction);
        let clipped = (padded.width() - unclipped_width).abs() > 1e-9
            || (padded.height() - unclipped_height).abs() > 1e-9;
        let (x0, y0, x1, y1) = crop_rect(&det.bbox, padding_fraction, w, h);
        let ref_crop = source.crop(x0, y0, x1, y1);
        let variant_crops = variants
            .iter()
            .map(|(codec, qf, raster)| VariantCrop {
                codec: codec.clone(),
                qf: *qf,
                crop: raster.crop(x0, y0, x1, y1),
            })
            .collect();
        out.push(ObjectCrops {
            object_id: i.to_string(),
            ref_crop,
            variant_crops,
            clipped,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GtRecord {
    pub boxes: Vec<Detection<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub strings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub person: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub database_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub database_box: Option<Detection<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantRecord {
    pub codec: String,
    pub qf: i32,
    pub path: String,
    pub psnr_db: f64,
}

/// One manifest line. Paths are relative to the manifest's directory so
/// runs are relocatable and byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub schema_version: u32,
    pub task: Task,
    pub source_id: String,
    pub source_path: String,
    pub width: u32,
    pub height: u32,
    pub gt: GtRecord,
    pub variants: Vec<VariantRecord>,
    pub split: Option<Split>,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub frames: Vec<FrameRecord>,
}

impl Manifest {
    pub fn task(&self) -> Option<Task> {
        self.frames.first().map(|f| f.task)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, f) in self.frames.iter().enumerate() {
            if f.schema_version != crate::SCHEMA_VERSION {
                return Err(Error::ManifestSchemaMismatch {
                    expected: crate::SCHEMA_VERSION,
                    found: f.schema_version,
                });
            }
            if !seen.insert(&f.source_id) {
                return Err(Error::ManifestFormat {
                    line: i + 1,
                    message: format!("duplicate source_id {:?}", f.source_id),
                });
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for frame in &self.frames {
            serde_json::to_writer(&mut buf, frame).map_err(|e| Error::ManifestFormat {
                line: 0,
                message: e.to_string(),
            })?;
            buf.write_all(b"\n").expect("vec write");
        }
        atomic_write(path, &buf)
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut frames = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let frame: FrameRecord =
                serde_json::from_str(&line).map_err(|e| Error::ManifestFormat {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            frames.push(frame);
        }
        let manifest = Manifest { frames };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Resolves a frame record into a loadable [`LabeledFrame`], joining
    /// relative paths onto `base_dir`.
    pub fn resolve_frame(&self, record: &FrameRecord, base_dir: &Path) -> Result<LabeledFrame> {
        let resolve = |p: &str| -> PathBuf {
            let path = Path::new(p);
            if path.is_absolute() {
                path.to_path_buf()
            } else {
                base_dir.join(path)
            }
        };
        let source =
            ImageRef::from_path_with_dims(resolve(&record.source_path), record.width, record.height)?;
        let variants = record
            .variants
            .iter()
            .map(|v| {
                Ok(LabeledVariant {
                    codec: v.codec.clone(),
                    qf: v.qf,
                    image: ImageRef::from_path_with_dims(
                        resolve(&v.path),
                        record.width,
                        record.height,
                    )?,
                    psnr_db: v.psnr_db,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let alphabet = crate::types::Alphabet::default();
        let plate_strings = record
            .gt
            .strings
            .iter()
            .map(|s| PlateString::new(s.clone(), 1.0, &alphabet))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledFrame {
            source_id: record.source_id.clone(),
            source,
            gt: record.gt.boxes.clone(),
            plate_strings,
            variants,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BoundingBox;
    use std::sync::Mutex;

    fn gradient_image(w: u32, h: u32) -> Raster {
        let mut r = Raster::new(w, h, 3, 0);
        for y in 0..h {
            for x in 0..w {
                let v = ((x + y) * 255 / (w + h - 2).max(1)) as u8;
                r.set(x, y, 0, v);
                r.set(x, y, 1, v / 2 + 60);
                r.set(x, y, 2, 255 - v);
            }
        }
        r
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let img = ImageRef::from_raster(gradient_image(16, 16));
        assert_eq!(compute_psnr(&img, &img).unwrap(), 100.0);
    }

    #[test]
    fn psnr_full_scale_error_is_zero_db() {
        let a = ImageRef::from_raster(Raster::new(8, 8, 1, 0));
        let b = ImageRef::from_raster(Raster::new(8, 8, 1, 255));
        assert_eq!(compute_psnr(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn psnr_single_pixel_error() {
        // one pixel off by 16 in a 16x16 single-channel image: MSE = 1
        let a = Raster::new(16, 16, 1, 100);
        let mut b = a.clone();
        b.set(5, 5, 0, 116);
        let got = compute_psnr(&ImageRef::from_raster(a), &ImageRef::from_raster(b)).unwrap();
        assert!((got - 20.0 * 255f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn psnr_dimension_mismatch_rejected() {
        let a = ImageRef::from_raster(Raster::new(8, 8, 1, 0));
        let b = ImageRef::from_raster(Raster::new(8, 9, 1, 0));
        assert!(compute_psnr(&a, &b).is_err());
    }

    #[test]
    fn jpeg_q100_on_gradient_clears_40db() {
        let dir = tempfile::tempdir().unwrap();
        let src = ImageRef::from_raster(gradient_image(64, 64));
        let codec = CodecSpec::jpeg(vec![100]);
        let out = dir.path().join("v.jpg");
        let variant = encode_variant(&src, &codec, 100, &out).unwrap();
        assert!(compute_psnr(&src, &variant).unwrap() > 40.0);
    }

    #[test]
    fn jpeg_quality_orders_psnr() {
        let dir = tempfile::tempdir().unwrap();
        let src = ImageRef::from_raster(gradient_image(64, 64).with_noise(12.0, 3));
        let codec = CodecSpec::jpeg(vec![10, 90]);
        let lo = encode_variant(&src, &codec, 10, &dir.path().join("lo.jpg")).unwrap();
        let hi = encode_variant(&src, &codec, 90, &dir.path().join("hi.jpg")).unwrap();
        assert!(compute_psnr(&src, &lo).unwrap() < compute_psnr(&src, &hi).unwrap());
    }

    #[test]
    fn unknown_encoder_binary_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let src = ImageRef::from_raster(gradient_image(16, 16));
        let codec = CodecSpec {
            name: "ghost".into(),
            kind: CodecKind::External {
                encode: "definitely-not-a-binary-xyz {input} {output} {qf}".into(),
                decode: None,
                ext: "bin".into(),
            },
            grid: vec![10],
            qf_range: (0, 63),
        };
        let got = encode_variant(&src, &codec, 10, &dir.path().join("v.bin"));
        assert!(matches!(got, Err(Error::EncoderFailed { .. })));
    }

    #[test]
    fn external_copy_codec_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let src_path = dir.path().join("src.png");
        gradient_image(24, 24).save_png(&src_path).unwrap();
        let src = ImageRef::open(&src_path).unwrap();
        let codec = CodecSpec {
            name: "copy".into(),
            kind: CodecKind::External {
                encode: "cp {input} {output}".into(),
                decode: None,
                ext: "png".into(),
            },
            grid: vec![1],
            qf_range: (1, 1),
        };
        let variant = encode_variant(&src, &codec, 1, &dir.path().join("v.png")).unwrap();
        assert_eq!(compute_psnr(&src, &variant).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn histogram_emd_basics() {
        let edges = PsnrHistogram::uniform_edges(0.0, 10.0, 10);
        let a = PsnrHistogram::from_samples(&[1.5, 2.5], edges.clone());
        let b = PsnrHistogram::from_samples(&[1.5, 2.5], edges.clone());
        assert_eq!(a.emd(&b), 0.0);
        let c = PsnrHistogram::from_samples(&[5.5, 6.5], edges);
        assert!(a.emd(&c) > 0.0);
    }

    #[test]
    fn calibration_fixed_point() {
        // probe: psnr == qf exactly
        let mut probe = |_i: usize, qf: i32| Ok(qf as f64);
        let edges = PsnrHistogram::uniform_edges(0.0, 60.0, 60);
        let target = PsnrHistogram::from_samples(&[20.0, 40.0], edges);
        let candidates: Vec<i32> = (1..=59).collect();
        let cal =
            calibrate_quality_grid(&mut probe, 2, &candidates, &[20, 40], &target).unwrap();
        assert_eq!(cal.grid, vec![20, 40]);
        assert_eq!(cal.distance, 0.0);
        assert!(cal.warnings.is_empty());
    }

    #[test]
    fn calibration_recovers_target_grid() {
        let mut probe = |_i: usize, qf: i32| Ok(qf as f64);
        let edges = PsnrHistogram::uniform_edges(0.0, 60.0, 60);
        let target = PsnrHistogram::from_samples(&[20.0, 20.0, 40.0, 40.0], edges);
        let candidates: Vec<i32> = (1..=59).collect();
        let cal =
            calibrate_quality_grid(&mut probe, 2, &candidates, &[10, 50], &target).unwrap();
        assert_eq!(cal.grid, vec![20, 40]);
        assert_eq!(cal.distance, 0.0);
    }

    struct StubDetector {
        responses: Mutex<Vec<Vec<Detection<f64>>>>,
        next: Mutex<usize>,
    }

    impl StubDetector {
        fn cycling(responses: Vec<Vec<Detection<f64>>>) -> Self {
            Self {
                responses: Mutex::new(responses),
                next: Mutex::new(0),
            }
        }
    }

    impl DetectorBackend for StubDetector {
        fn name(&self) -> &str {
            "stub"
        }
        fn task(&self) -> Task {
            Task::Object
        }
        fn detect(&self, _image: &ImageRef) -> Result<Vec<Detection<f64>>> {
            let responses = self.responses.lock().unwrap();
            let mut next = self.next.lock().unwrap();
            let out = responses[*next % responses.len()].clone();
            *next += 1;
            Ok(out)
        }
    }

    fn det(conf: f64) -> Detection<f64> {
        Detection::new(BoundingBox::new(1.0, 1.0, 5.0, 5.0).unwrap(), 0, conf).unwrap()
    }

    #[test]
    fn autolabel_spacing_rule() {
        let frames: Vec<ImageRef> = (0..500)
            .map(|_| ImageRef::from_raster(Raster::new(8, 8, 1, 0)))
            .collect();
        let backend = StubDetector::cycling(vec![vec![det(0.9)]]);
        let selected = autolabel_indices(&frames, &backend, 0.7, 100).unwrap();
        let indices: Vec<usize> = selected.iter().map(|(i, _)| *i).collect();
        assert_eq!(indices, vec![0, 100, 200, 300, 400]);
    }

    #[test]
    fn autolabel_drops_low_confidence() {
        let frames: Vec<ImageRef> = (0..10)
            .map(|_| ImageRef::from_raster(Raster::new(8, 8, 1, 0)))
            .collect();
        let backend = StubDetector::cycling(vec![vec![det(0.5)]]);
        assert!(autolabel_indices(&frames, &backend, 0.7, 1)
            .unwrap()
            .is_empty());
    }

    struct QueueReader {
        responses: Mutex<std::collections::VecDeque<PlateString>>,
    }

    impl PlateRecognizer for QueueReader {
        fn name(&self) -> &str {
            "queue"
        }
        fn alphabet(&self) -> &crate::types::Alphabet {
            static ALPHA: std::sync::OnceLock<crate::types::Alphabet> = std::sync::OnceLock::new();
            ALPHA.get_or_init(crate::types::Alphabet::default)
        }
        fn recognize(&self, _image: &ImageRef) -> Result<PlateString> {
            Ok(self
                .responses
                .lock()
                .unwrap()
                .pop_front()
                .expect("queued response"))
        }
    }

    fn plate_input(strings: &[&str]) -> (Vec<(ImageRef, Vec<Detection<f64>>)>, QueueReader) {
        let alphabet = crate::types::Alphabet::default();
        let frames = strings
            .iter()
            .map(|_| {
                (
                    ImageRef::from_raster(Raster::new(16, 16, 1, 0)),
                    vec![det(1.0)],
                )
            })
            .collect();
        let reader = QueueReader {
            responses: Mutex::new(
                strings
                    .iter()
                    .map(|s| PlateString::new(*s, 1.0, &alphabet).unwrap())
                    .collect(),
            ),
        };
        (frames, reader)
    }

    #[test]
    fn dedup_drops_identical_and_near_plates() {
        let (frames, reader) = plate_input(&["AB123", "AB123"]);
        let kept = dedup_plate_indices(&frames, &reader, 1).unwrap();
        assert_eq!(kept.len(), 1);

        let (frames, reader) = plate_input(&["AB123", "AB124"]);
        let kept = dedup_plate_indices(&frames, &reader, 1).unwrap();
        assert_eq!(kept.len(), 1);

        let (frames, reader) = plate_input(&["AB123", "XY987"]);
        let kept = dedup_plate_indices(&frames, &reader, 1).unwrap();
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn dedup_requires_full_recognition() {
        let alphabet = crate::types::Alphabet::default();
        let frames = vec![(
            ImageRef::from_raster(Raster::new(16, 16, 1, 0)),
            vec![det(1.0)],
        )];
        let reader = QueueReader {
            responses: Mutex::new(
                [PlateString::new("AB123", 0.9, &alphabet).unwrap()]
                    .into_iter()
                    .collect(),
            ),
        };
        assert!(dedup_plate_indices(&frames, &reader, 1).unwrap().is_empty());
    }

    #[test]
    fn face_pair_selection_argmax_and_skip() {
        let mk = || ImageRef::from_raster(Raster::new(8, 8, 1, 0));
        let mut persons = BTreeMap::new();
        persons.insert("alice".to_string(), vec![mk(), mk()]);
        persons.insert("bob".to_string(), vec![mk()]);
        // alice image 0 -> 0.9, image 1 -> 0.8; bob image -> 0.9
        let backend = StubDetector::cycling(vec![vec![det(0.9)], vec![det(0.8)], vec![det(0.9)]]);
        let sel = select_face_pairs(&persons, &backend, 7).unwrap();
        assert_eq!(sel.pairs.len(), 1);
        assert_eq!(sel.skipped_persons, 1);
        assert_eq!(sel.pairs[0].database_box.confidence, 0.9);
        assert_eq!(sel.pairs[0].query_box.confidence, 0.8);
    }

    #[test]
    fn crops_follow_padding_and_clipping() {
        let source = Raster::new(40, 40, 3, 90);
        let frame = LabeledFrame {
            source_id: "f".into(),
            source: ImageRef::from_raster(source.clone()),
            gt: vec![Detection::new(
                BoundingBox::new(10.0, 10.0, 20.0, 20.0).unwrap(),
                0,
                1.0,
            )
            .unwrap()],
            plate_strings: Vec::new(),
            variants: vec![LabeledVariant {
                codec: "jpeg".into(),
                qf: 50,
                image: ImageRef::from_raster(source),
                psnr_db: 100.0,
            }],
        };
        let zero = extract_crops(&frame, 0.0).unwrap();
        assert_eq!(zero[0].ref_crop.width(), 10);
        assert_eq!(zero[0].ref_crop.height(), 10);
        assert_eq!(zero[0].variant_crops[0].crop.width(), 10);
        assert!(!zero[0].clipped);

        let padded = extract_crops(&frame, 0.1).unwrap();
        assert_eq!(padded[0].ref_crop.width(), 12);
        assert_eq!(padded[0].ref_crop.height(), 12);

        // box flush at the corner: padding clips
        let corner = LabeledFrame {
            gt: vec![Detection::new(
                BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
                0,
                1.0,
            )
            .unwrap()],
            ..frame
        };
        let crops = extract_crops(&corner, 0.1).unwrap();
        assert!(crops[0].clipped);
        assert_eq!(crops[0].ref_crop.width(), 11);
    }

    #[test]
    fn manifest_roundtrip_and_schema_check() {
        let dir = tempfile::tempdir().unwrap();
        let record = FrameRecord {
            schema_version: crate::SCHEMA_VERSION,
            task: Task::Object,
            source_id: "frame_0".into(),
            source_path: "corpus/object/frame_0/source.png".into(),
            width: 32,
            height: 32,
            gt: GtRecord {
                boxes: vec![det(1.0)],
                ..GtRecord::default()
            },
            variants: vec![VariantRecord {
                codec: "jpeg".into(),
                qf: 50,
                path: "corpus/object/frame_0/jpeg_50.jpg".into(),
                psnr_db: 33.25,
            }],
            split: Some(Split::Train),
            seed: 42,
        };
        let manifest = Manifest {
            frames: vec![record],
        };
        let path = dir.path().join("manifest.jsonl");
        manifest.write(&path).unwrap();
        let back = Manifest::read(&path).unwrap();
        assert_eq!(back.frames.len(), 1);
        assert_eq!(back.frames[0].source_id, "frame_0");
        assert_eq!(back.frames[0].split, Some(Split::Train));

        let mut bad = Manifest::read(&path).unwrap();
        bad.frames[0].schema_version = 99;
        assert!(matches!(
            bad.validate(),
            Err(Error::ManifestSchemaMismatch { .. })
        ));
    }

    #[test]
    fn atomic_write_creates_parents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/c.txt");
        atomic_write(&path, b"hello").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"hello");
    }
}
