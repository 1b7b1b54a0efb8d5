//! Deterministic synthetic oracle: a scene renderer plus matching
//! detector, embedder and plate reader with specified degradation
//! behavior.
//!
//! Scene conventions (shared constants below): textured background kept
//! strictly below the detection threshold, solid high-contrast rectangles
//! for objects, a bright plate carrying dark 5x7 glyphs, and per-person
//! tonal grid patterns for faces. Because both renderer and readers are
//! pure functions of pixels, every end-to-end test is byte-reproducible.

use crate::error::{Error, Result};
use crate::font;
use crate::raster::Raster;
use crate::types::{
    Alphabet, BoundingBox, Detection, EmbeddingVector, ImageRef, PlateString, Task,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Grayscale level separating background from objects/plates.
const DETECT_THRESHOLD: f64 = 128.0;
/// Brighter threshold used to locate the plate body inside a crop.
const PLATE_LOCATE_THRESHOLD: f64 = 150.0;
/// Components smaller than this are noise, not objects.
const MIN_COMPONENT_AREA: usize = 16;
/// Glyph cells darker than this count as ink.
const INK_THRESHOLD: f64 = 128.0;
/// Characters whose best template similarity falls below this are dropped
/// as illegible.
const LEGIBILITY_CUTOFF: f64 = 0.6;

/// Base-layout geometry of a rendered plate (before integer scaling):
/// 2px margin, 5x7 glyphs, 1px gap.
const PLATE_MARGIN: u32 = 2;
const CELL_W: u32 = font::GLYPH_WIDTH + 1;
const PLATE_BASE_H: u32 = font::GLYPH_HEIGHT + 2 * PLATE_MARGIN;

fn plate_base_width(chars: u32) -> u32 {
    2 * PLATE_MARGIN + chars * CELL_W - 1
}

// ---------------------------------------------------------------------------
// scene rendering

fn paint_background(img: &mut Raster, rng: &mut ChaCha8Rng) {
    let (w, h) = (img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let gradient = (12 * x / w.max(1)) as i32;
            let noise: i32 = rng.gen_range(-10..=10);
            let v = (48 + gradient + noise).clamp(0, 72) as u8;
            for c in 0..img.channels() {
                img.set(x, y, c, v);
            }
        }
    }
}

fn paint_textured_rect(
    img: &mut Raster,
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
    level: u8,
    rng: &mut ChaCha8Rng,
) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            let noise: i32 = rng.gen_range(-3..=3);
            let v = (level as i32 + noise).clamp(131, 255) as u8;
            for c in 0..img.channels() {
                img.set(x, y, c, v);
            }
        }
    }
}

/// Renders a detection scene: `n_objects` solid textured rectangles on a
/// textured background. Returns the image and the exact rendered boxes as
/// ground truth (class 0, confidence 1).
pub fn detection_scene(seed: u64, width: u32, height: u32, n_objects: usize) -> (Raster, Vec<Detection<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Raster::new(width, height, 3, 0);
    paint_background(&mut img, &mut rng);

    // place objects on a jittered grid so they never touch
    let cols = (n_objects as u32).min(3).max(1);
    let rows = ((n_objects as u32) + cols - 1) / cols;
    let cell_w = width / cols.max(1);
    let cell_h = height / rows.max(1);
    let mut gt = Vec::new();
    for i in 0..n_objects {
        let (col, row) = (i as u32 % cols, i as u32 / cols);
        let max_w = (cell_w.saturating_sub(12)).clamp(9, 24);
        let max_h = (cell_h.saturating_sub(12)).clamp(9, 24);
        let w = rng.gen_range(8..=max_w);
        let h = rng.gen_range(8..=max_h);
        let x0 = col * cell_w + rng.gen_range(4..=(cell_w.saturating_sub(w + 4)).max(5));
        let y0 = row * cell_h + rng.gen_range(4..=(cell_h.saturating_sub(h + 4)).max(5));
        // mixed contrast: weak objects sit just above the detection
        // threshold and degrade first under compression; strong ones only
        // give way at the lowest qualities
        let level = *[136u8, 139, 143, 148, 156, 170, 190, 210]
            .get(rng.gen_range(0..8))
            .unwrap();
        paint_textured_rect(&mut img, x0, y0, w, h, level, &mut rng);
        let bbox = BoundingBox::new(
            x0 as f64,
            y0 as f64,
            (x0 + w) as f64,
            (y0 + h) as f64,
        )
        .expect("rendered box is valid");
        gt.push(Detection::new(bbox, 0, 1.0).expect("confidence 1"));
    }
    (img, gt)
}

/// Renders one license plate (bright body, dark glyphs) at a seeded
/// position and integer scale. Returns the image, the plate box, and the
/// rendered string.
pub fn plate_scene(seed: u64, width: u32, height: u32) -> (Raster, Detection<f64>, PlateString) {
    let alphabet = Alphabet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Raster::new(width, height, 3, 0);
    paint_background(&mut img, &mut rng);

    let n_chars = rng.gen_range(5..=7u32);
    let chars: String = (0..n_chars)
        .map(|_| alphabet.chars()[rng.gen_range(0..alphabet.chars().len())])
        .collect();
    let base_w = plate_base_width(n_chars);

    let max_scale = ((width.saturating_sub(8)) / base_w)
        .min((height.saturating_sub(8)) / PLATE_BASE_H)
        .clamp(1, 3);
    // weighted toward small scales: fine glyphs carry the degradation
    // signal at mid qualities
    let scale_pool = [1u32, 1, 2, 2, 3];
    let scale = scale_pool[rng.gen_range(0..scale_pool.len())].min(max_scale);
    let (pw, ph) = (base_w * scale, PLATE_BASE_H * scale);
    let x0 = rng.gen_range(4..=(width - pw - 4).max(5));
    let y0 = rng.gen_range(4..=(height - ph - 4).max(5));

    img.fill_rect(x0, y0, x0 + pw, y0 + ph, &[200, 200, 200]);
    for (k, ch) in chars.chars().enumerate() {
        let gx0 = PLATE_MARGIN + k as u32 * CELL_W;
        for gy in 0..font::GLYPH_HEIGHT {
            for gx in 0..font::GLYPH_WIDTH {
                if font::inked(ch, gx, gy) {
                    let px = x0 + (gx0 + gx) * scale;
                    let py = y0 + (PLATE_MARGIN + gy) * scale;
                    img.fill_rect(px, py, px + scale, py + scale, &[88, 88, 88]);
                }
            }
        }
    }

    let bbox = BoundingBox::new(x0 as f64, y0 as f64, (x0 + pw) as f64, (y0 + ph) as f64)
        .expect("plate box is valid");
    let det = Detection::new(bbox, 0, 1.0).expect("confidence 1");
    let gt = PlateString::new(chars, 1.0, &alphabet).expect("alphabet chars");
    (img, det, gt)
}

/// Renders one face proxy: a per-person tonal grid pattern inside a box.
/// `variant` 0 is the full-contrast portrait; higher variants shift the
/// pattern slightly and lower its contrast, so a confidence-based argmax
/// picks variant 0 as the database image.
pub fn face_image(person_seed: u64, variant: u32, width: u32, height: u32) -> (Raster, Detection<f64>) {
    let mut scene_rng = ChaCha8Rng::seed_from_u64(person_seed.wrapping_mul(1_000_003) + variant as u64);
    let mut img = Raster::new(width, height, 3, 0);
    paint_background(&mut img, &mut scene_rng);

    let (fw, fh) = (
        (width / 5).clamp(20, 28),
        (height / 4).clamp(24, 34),
    );
    let x0 = width / 4 + scene_rng.gen_range(0..=6);
    let y0 = height / 4 + scene_rng.gen_range(0..=6);

    // pattern keyed by person only; variant shifts sampling phase
    let mut pattern_rng = ChaCha8Rng::seed_from_u64(person_seed);
    let tones: Vec<u8> = (0..80)
        .map(|_| *[140u8, 180, 220].get(pattern_rng.gen_range(0..3)).unwrap())
        .collect();
    let contrast = if variant == 0 {
        1.0
    } else {
        0.80 + 0.03 * ((person_seed as u32 + variant) % 5) as f64
    };
    let (shift_x, shift_y) = if variant == 0 {
        (0, 0)
    } else {
        (variant % 3, (variant / 2) % 3)
    };
    for y in 0..fh.min(height - y0) {
        for x in 0..fw.min(width - x0) {
            let gx = ((x + shift_x) * 8 / fw.max(1)).min(7);
            let gy = ((y + shift_y) * 10 / fh.max(1)).min(9);
            let tone = tones[(gy * 8 + gx) as usize] as f64;
            let v = (64.0 + (tone - 64.0) * contrast).round().clamp(130.0, 255.0) as u8;
            for c in 0..img.channels() {
                img.set(x0 + x, y0 + y, c, v);
            }
        }
    }
    let bbox = BoundingBox::new(
        x0 as f64,
        y0 as f64,
        (x0 + fw.min(width - x0)) as f64,
        (y0 + fh.min(height - y0)) as f64,
    )
    .expect("face box is valid");
    (img, Detection::new(bbox, 0, 1.0).expect("confidence 1"))
}

// ---------------------------------------------------------------------------
// detector

/// Threshold/connected-component detector over bright regions.
///
/// Confidence is `clamp01(fill / fill_ref) * clamp01(contrast /
/// contrast_ref)` where `fill` is the fraction of the component's bounding
/// box above threshold and `contrast` is the mean level difference between
/// the component and a 2px ring outside its box. Both terms degrade
/// monotonically under blur, noise and compression artifacts; on a clean
/// rendered rectangle both clamp to 1.
#[derive(Debug, Clone)]
pub struct SyntheticDetector {
    task: Task,
    fill_ref: f64,
    contrast_ref: f64,
}

impl SyntheticDetector {
    pub fn objects() -> Self {
        Self {
            task: Task::Object,
            fill_ref: 1.0,
            contrast_ref: 64.0,
        }
    }

    /// Plates carry dark glyphs that punch holes in the bright component,
    /// so full fill is not reachable; the reference is lowered to keep a
    /// clean plate at confidence 1.
    pub fn plates() -> Self {
        Self {
            task: Task::Plate,
            fill_ref: 0.70,
            contrast_ref: 64.0,
        }
    }

    /// Faces use a higher contrast reference so reduced-contrast query
    /// renders score below the full-contrast portrait.
    pub fn faces() -> Self {
        Self {
            task: Task::Face,
            fill_ref: 1.0,
            contrast_ref: 130.0,
        }
    }
}

struct Component {
    min_x: u32,
    min_y: u32,
    max_x: u32,
    max_y: u32,
    area: usize,
    level_sum: f64,
    pixels: Vec<(u32, u32)>,
}

impl Component {
    /// Box spanned by the rows/columns whose occupancy reaches half the
    /// peak occupancy, scanned inward from each side. A solid rectangle
    /// keeps its exact extent; compression artifacts that erode the
    /// boundary shrink the box gradually.
    fn trimmed_box(&self) -> (u32, u32, u32, u32) {
        let w = (self.max_x - self.min_x + 1) as usize;
        let h = (self.max_y - self.min_y + 1) as usize;
        let mut cols = vec![0usize; w];
        let mut rows = vec![0usize; h];
        for &(x, y) in &self.pixels {
            cols[(x - self.min_x) as usize] += 1;
            rows[(y - self.min_y) as usize] += 1;
        }
        let col_cut = cols.iter().copied().max().unwrap_or(0).div_ceil(2);
        let row_cut = rows.iter().copied().max().unwrap_or(0).div_ceil(2);
        let x_lo = cols.iter().position(|&c| c >= col_cut).unwrap_or(0);
        let x_hi = cols.iter().rposition(|&c| c >= col_cut).unwrap_or(w - 1);
        let y_lo = rows.iter().position(|&c| c >= row_cut).unwrap_or(0);
        let y_hi = rows.iter().rposition(|&c| c >= row_cut).unwrap_or(h - 1);
        (
            self.min_x + x_lo as u32,
            self.min_y + y_lo as u32,
            self.min_x + x_hi as u32,
            self.min_y + y_hi as u32,
        )
    }
}

fn bright_components(gray: &Raster, threshold: f64) -> Vec<Component> {
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut label = vec![u32::MAX; w * h];
    let mut comps: Vec<Component> = Vec::new();
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            let idx = sy * w + sx;
            if label[idx] != u32::MAX || (gray.data()[idx] as f64) < threshold {
                continue;
            }
            let id = comps.len() as u32;
            comps.push(Component {
                min_x: sx as u32,
                min_y: sy as u32,
                max_x: sx as u32,
                max_y: sy as u32,
                area: 0,
                level_sum: 0.0,
            });
            stack.push((sx, sy));
            label[idx] = id;
            while let Some((x, y)) = stack.pop() {
                let comp = &mut comps[id as usize];
                comp.area += 1;
                comp.level_sum += gray.data()[y * w + x] as f64;
                comp.min_x = comp.min_x.min(x as u32);
                comp.max_x = comp.max_x.max(x as u32);
                comp.min_y = comp.min_y.min(y as u32);
                comp.max_y = comp.max_y.max(y as u32);
                let neighbors = [
                    (x.wrapping_sub(1), y),
                    (x + 1, y),
                    (x, y.wrapping_sub(1)),
                    (x, y + 1),
                ];
                for (nx, ny) in neighbors {
                    if nx < w && ny < h {
                        let nidx = ny * w + nx;
                        if label[nidx] == u32::MAX && gray.data()[nidx] as f64 >= threshold {
                            label[nidx] = id;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
        }
    }
    comps
}

fn ring_mean(gray: &Raster, c: &Component) -> f64 {
    let (w, h) = (gray.width(), gray.height());
    let x0 = c.min_x.saturating_sub(2);
    let y0 = c.min_y.saturating_sub(2);
    let x1 = (c.max_x + 3).min(w);
    let y1 = (c.max_y + 3).min(h);
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let inside = x >= c.min_x && x <= c.max_x && y >= c.min_y && y <= c.max_y;
            if !inside {
                sum += gray.get(x, y, 0) as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl super::DetectorBackend for SyntheticDetector {
    fn name(&self) -> &str {
        match self.task {
            Task::Object => "synthetic-object",
            Task::Face => "synthetic-face",
            Task::Plate => "synthetic-plate",
        }
    }

    fn task(&self) -> Task {
        self.task
    }

    fn detect(&self, image: &ImageRef) -> Result<Vec<Detection<f64>>> {
        let gray = image.load()?.to_gray();
        let mut comps = bright_components(&gray, DETECT_THRESHOLD);
        comps.retain(|c| c.area >= MIN_COMPONENT_AREA);
        // glyph counters and other enclosed holes show up as bright
        // components nested inside a larger component's box; a box fully
        // contained in another is not a separate object
        let boxes: Vec<(u32, u32, u32, u32, usize)> = comps
            .iter()
            .map(|c| (c.min_x, c.min_y, c.max_x, c.max_y, c.area))
            .collect();
        comps.retain(|c| {
            !boxes.iter().any(|&(x0, y0, x1, y1, area)| {
                area > c.area
                    && x0 <= c.min_x
                    && y0 <= c.min_y
                    && x1 >= c.max_x
                    && y1 >= c.max_y
            })
        });
        comps.sort_by_key(|c| (c.min_y, c.min_x));
        let mut out = Vec::with_capacity(comps.len());
        for c in &comps {
            let bbox_area = ((c.max_x - c.min_x + 1) * (c.max_y - c.min_y + 1)) as f64;
            let fill = c.area as f64 / bbox_area;
            let contrast = c.level_sum / c.area as f64 - ring_mean(&gray, c);
            let confidence =
                (fill / self.fill_ref).min(1.0) * (contrast / self.contrast_ref).clamp(0.0, 1.0);
            let bbox = BoundingBox::new(
                c.min_x as f64,
                c.min_y as f64,
                (c.max_x + 1) as f64,
                (c.max_y + 1) as f64,
            )?;
            out.push(Detection::new(bbox, 0, confidence.clamp(0.0, 1.0))?);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// embedder

/// Mean-pooled fixed random projection of pixels: crops are resized to
/// 32x32 gray, scaled to [0, 1], and multiplied by a seeded projection
/// matrix with zero bias. An all-zero input maps to the zero vector, which
/// is rejected as an invalid embedding.
pub struct SyntheticEmbedder {
    dim: usize,
    projection: Vec<f64>, // dim x 1024, row-major
}

const EMBED_SIDE: u32 = 32;
const EMBED_PIXELS: usize = (EMBED_SIDE * EMBED_SIDE) as usize;

impl SyntheticEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..dim * EMBED_PIXELS)
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect();
        Self { dim, projection }
    }

    /// Largest column norm of the projection divided by the pixel count:
    /// an upper bound on the embedding change caused by one full-scale
    /// pixel change.
    pub fn per_pixel_bound(&self) -> f64 {
        (0..EMBED_PIXELS)
            .map(|p| {
                (0..self.dim)
                    .map(|d| self.projection[d * EMBED_PIXELS + p].powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
            / EMBED_PIXELS as f64
    }
}

impl super::FaceEmbedder for SyntheticEmbedder {
    fn name(&self) -> &str {
        "synthetic-embedder"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &ImageRef) -> Result<EmbeddingVector<f64>> {
        let gray = image.load()?.to_gray().resize(EMBED_SIDE, EMBED_SIDE);
        let pixels: Vec<f64> = gray.data().iter().map(|v| *v as f64 / 255.0).collect();
        let mut values = vec![0.0; self.dim];
        for (d, value) in values.iter_mut().enumerate() {
            let row = &self.projection[d * EMBED_PIXELS..(d + 1) * EMBED_PIXELS];
            *value = row
                .iter()
                .zip(&pixels)
                .map(|(m, x)| m * x)
                .sum::<f64>()
                / EMBED_PIXELS as f64;
        }
        let e = EmbeddingVector::new(values)?;
        if e.norm() == 0.0 {
            return Err(Error::ZeroNormEmbedding);
        }
        Ok(e)
    }
}

// ---------------------------------------------------------------------------
// plate reader

/// Template-matching reader for the shared 5x7 font. Locates the bright
/// plate body, infers the integer render scale and cell count from the
/// base layout, samples each glyph cell, and picks the closest template.
/// Characters below the legibility cutoff are dropped; the string
/// confidence is the mean cell similarity, exactly 1 on a clean render.
pub struct SyntheticPlateReader {
    alphabet: Alphabet,
}

impl Default for SyntheticPlateReader {
    fn default() -> Self {
        Self {
            alphabet: Alphabet::default(),
        }
    }
}

impl SyntheticPlateReader {
    pub fn new(alphabet: Alphabet) -> Self {
        Self { alphabet }
    }
}

impl super::PlateRecognizer for SyntheticPlateReader {
    fn name(&self) -> &str {
        "synthetic-plate-reader"
    }

    fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    fn recognize(&self, image: &ImageRef) -> Result<PlateString> {
        let gray = image.load()?.to_gray();
        let comps = bright_components(&gray, PLATE_LOCATE_THRESHOLD);
        let plate = comps
            .iter()
            .filter(|c| c.area >= 30)
            .max_by_key(|c| c.area);
        let Some(plate) = plate else {
            return PlateString::new("", 0.0, &self.alphabet);
        };
        let plate_w = (plate.max_x - plate.min_x + 1) as f64;
        let plate_h = (plate.max_y - plate.min_y + 1) as f64;
        let scale = plate_h / PLATE_BASE_H as f64;
        let n_chars = ((plate_w / scale - 2.0 * PLATE_MARGIN as f64 + 1.0) / CELL_W as f64)
            .round()
            .clamp(0.0, 12.0) as u32;
        if n_chars == 0 || scale <= 0.0 {
            return PlateString::new("", 0.0, &self.alphabet);
        }

        let sample_cell = |bx: f64, by: f64| -> f64 {
            // mean gray over the base-layout cell [bx, bx+1) x [by, by+1)
            let x0 = plate.min_x as f64 + bx * scale;
            let y0 = plate.min_y as f64 + by * scale;
            let x1 = (x0 + scale).min(gray.width() as f64);
            let y1 = (y0 + scale).min(gray.height() as f64);
            let (ix0, iy0) = (x0.floor().max(0.0) as u32, y0.floor().max(0.0) as u32);
            let (ix1, iy1) = ((x1.ceil() as u32).min(gray.width()), (y1.ceil() as u32).min(gray.height()));
            let mut sum = 0.0;
            let mut n = 0usize;
            for y in iy0..iy1 {
                for x in ix0..ix1 {
                    sum += gray.get(x, y, 0) as f64;
                    n += 1;
                }
            }
            if n == 0 {
                255.0
            } else {
                sum / n as f64
            }
        };

        let mut chars = String::new();
        let mut sim_sum = 0.0;
        for k in 0..n_chars {
            let cx0 = (PLATE_MARGIN + k * CELL_W) as f64;
            let mut pattern = [[false; font::GLYPH_WIDTH as usize]; font::GLYPH_HEIGHT as usize];
            for gy in 0..font::GLYPH_HEIGHT {
                for gx in 0..font::GLYPH_WIDTH {
                    let level = sample_cell(cx0 + gx as f64, (PLATE_MARGIN + gy) as f64);
                    pattern[gy as usize][gx as usize] = level < INK_THRESHOLD;
                }
            }
            let mut best: Option<(char, f64)> = None;
            for &cand in self.alphabet.chars() {
                let mut matches = 0u32;
                for gy in 0..font::GLYPH_HEIGHT {
                    for gx in 0..font::GLYPH_WIDTH {
                        if font::inked(cand, gx, gy) == pattern[gy as usize][gx as usize] {
                            matches += 1;
                        }
                    }
                }
                let sim = matches as f64 / (font::GLYPH_WIDTH * font::GLYPH_HEIGHT) as f64;
                let better = match best {
                    None => true,
                    Some((_, s)) => sim > s,
                };
                if better {
                    best = Some((cand, sim));
                }
            }
            let (ch, sim) = best.expect("alphabet is non-empty");
            sim_sum += sim;
            if sim >= LEGIBILITY_CUTOFF {
                chars.push(ch);
            }
        }
        let confidence = (sim_sum / n_chars as f64).clamp(0.0, 1.0);
        PlateString::new(chars, confidence, &self.alphabet)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{DetectorBackend, FaceEmbedder, PlateRecognizer};
    use crate::types::iou;

    #[test]
    fn clean_rectangle_detected_with_full_confidence() {
        let mut img = Raster::new(64, 64, 3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        paint_background(&mut img, &mut rng);
        img.fill_rect(10, 10, 50, 50, &[200, 200, 200]);
        let detector = SyntheticDetector::objects();
        let dets = detector.detect(&ImageRef::from_raster(img)).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].confidence, 1.0);
        assert_eq!(
            dets[0].bbox,
            BoundingBox::new(10.0, 10.0, 50.0, 50.0).unwrap()
        );
    }

    #[test]
    fn blank_image_has_no_detections() {
        let mut img = Raster::new(64, 64, 3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        paint_background(&mut img, &mut rng);
        let detector = SyntheticDetector::objects();
        assert!(detector.detect(&ImageRef::from_raster(img)).unwrap().is_empty());
    }

    #[test]
    fn noise_lowers_confidence() {
        let mut img = Raster::new(64, 64, 3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        paint_background(&mut img, &mut rng);
        img.fill_rect(10, 10, 50, 50, &[200, 200, 200]);
        let truth = BoundingBox::new(10.0, 10.0, 50.0, 50.0).unwrap();
        let noisy = img.with_noise(40.0, 99);
        let detector = SyntheticDetector::objects();
        let dets = detector.detect(&ImageRef::from_raster(noisy)).unwrap();
        let best = dets
            .iter()
            .max_by(|a, b| {
                iou(&a.bbox, &truth)
                    .partial_cmp(&iou(&b.bbox, &truth))
                    .unwrap()
            })
            .expect("rectangle still found under noise");
        assert!(best.confidence < 1.0);
    }

    #[test]
    fn scene_gt_matches_detector_output() {
        let (img, gt) = detection_scene(7, 160, 120, 3);
        let detector = SyntheticDetector::objects();
        let dets = detector.detect(&ImageRef::from_raster(img)).unwrap();
        assert_eq!(dets.len(), gt.len());
        for g in &gt {
            let best = dets
                .iter()
                .map(|d| iou(&d.bbox, &g.bbox))
                .fold(0.0, f64::max);
            assert!(best > 0.999, "best IoU {best}");
        }
    }

    #[test]
    fn embedder_is_deterministic_and_rejects_zero() {
        let embedder = SyntheticEmbedder::new(32, 5);
        let (img, _) = face_image(11, 0, 96, 96);
        let r = ImageRef::from_raster(img);
        let a = embedder.embed(&r).unwrap();
        let b = embedder.embed(&r).unwrap();
        assert_eq!(a, b);
        let zero = ImageRef::from_raster(Raster::new(16, 16, 1, 0));
        assert!(matches!(
            embedder.embed(&zero),
            Err(Error::ZeroNormEmbedding)
        ));
    }

    #[test]
    fn embedder_one_pixel_bound() {
        let embedder = SyntheticEmbedder::new(32, 5);
        let base = Raster::new(EMBED_SIDE, EMBED_SIDE, 1, 100);
        let mut bumped = base.clone();
        bumped.set(3, 4, 0, 255);
        let ea = embedder.embed(&ImageRef::from_raster(base)).unwrap();
        let eb = embedder.embed(&ImageRef::from_raster(bumped)).unwrap();
        let diff: f64 = ea
            .values()
            .iter()
            .zip(eb.values())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let delta = (255.0 - 100.0) / 255.0;
        assert!(diff <= embedder.per_pixel_bound() * delta + 1e-12);
    }

    #[test]
    fn clean_plate_reads_exactly() {
        let (img, _, gt) = plate_scene(21, 160, 96);
        let reader = SyntheticPlateReader::default();
        let read = reader.recognize(&ImageRef::from_raster(img)).unwrap();
        assert_eq!(read.chars, gt.chars);
        assert_eq!(read.confidence, 1.0);
    }

    #[test]
    fn blank_crop_reads_empty() {
        let mut img = Raster::new(48, 24, 3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        paint_background(&mut img, &mut rng);
        let reader = SyntheticPlateReader::default();
        let read = reader.recognize(&ImageRef::from_raster(img)).unwrap();
        assert_eq!(read.chars, "");
        assert_eq!(read.confidence, 0.0);
    }

    #[test]
    fn heavy_blur_degrades_reading() {
        let (img, det, gt) = plate_scene(22, 160, 96);
        let crop = img.crop(
            det.bbox.x_min as u32,
            det.bbox.y_min as u32,
            det.bbox.x_max as u32,
            det.bbox.y_max as u32,
        );
        let blurred = crop.gaussian_blur(3.0);
        let reader = SyntheticPlateReader::default();
        let read = reader.recognize(&ImageRef::from_raster(blurred)).unwrap();
        assert!(read.confidence < 1.0);
        assert!(read.chars.len() < gt.chars.len() || read.chars != gt.chars);
    }

    #[test]
    fn face_portrait_outscores_queries() {
        let detector = SyntheticDetector::faces();
        let (portrait, _) = face_image(31, 0, 96, 96);
        let (query, _) = face_image(31, 1, 96, 96);
        let cp = detector
            .detect(&ImageRef::from_raster(portrait))
            .unwrap()
            .iter()
            .map(|d| d.confidence)
            .fold(0.0, f64::max);
        let cq = detector
            .detect(&ImageRef::from_raster(query))
            .unwrap()
            .iter()
            .map(|d| d.confidence)
            .fold(0.0, f64::max);
        assert!(cp > cq, "portrait {cp} vs query {cq}");
    }
}
