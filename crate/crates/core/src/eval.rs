//! Correlation harness: SRCC/PLCC of any candidate metric against the
//! ground-truth degradation scores, baseline full-reference metrics
//! (PSNR, SSIM), per-codec breakdowns and report files.

use crate::dataset::{psnr_from_rasters, Manifest};
use crate::error::{Error, Result};
use crate::font;
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::train::{TargetKind, TargetRecord, TrainedModel};
use crate::types::Task;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// rank and linear correlation

/// Ranks with ties assigned the average of the positions they cover
/// (1-based, standard Spearman convention).
pub fn average_ranks<T: Scalar>(values: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![T::zero(); values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average rank
        let avg = T::from_f64((i + j) as f64 / 2.0 + 1.0);
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_checked<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::SeriesLengthMismatch { a: x.len(), b: y.len() });
    }
    if x.len() < 3 {
        return Err(Error::TooFewSamples(x.len()));
    }
    let n = T::from_usize(x.len());
    let mean = |s: &[T]| s.iter().fold(T::zero(), |a, v| a + *v) / n;
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    let mut syy = T::zero();
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (*a - mx, *b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == T::zero() {
        return Err(Error::ConstantSeries { which: "x" });
    }
    if syy == T::zero() {
        return Err(Error::ConstantSeries { which: "y" });
    }
    // identical (or exactly mirrored) deviation vectors correlate at
    // exactly +/-1; bypass the sqrt rounding for those
    if sxx == syy {
        if sxy == sxx {
            return Ok(T::one());
        }
        if sxy == -sxx {
            return Ok(-T::one());
        }
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).max(-T::one()).min(T::one()))
}

/// Spearman rank correlation: Pearson over average-tie ranks.
pub fn srcc<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::SeriesLengthMismatch { a: x.len(), b: y.len() });
    }
    pearson_checked(&average_ranks(x), &average_ranks(y))
}

/// Pearson linear correlation.
pub fn plcc<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    pearson_checked(x, y)
}

// ---------------------------------------------------------------------------
// SSIM baseline

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5) of the
/// luma planes, with the standard stabilizers for 8-bit range.
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch {
            a_width: a.width(),
            a_height: a.height(),
            b_width: b.width(),
            b_height: b.height(),
        });
    }
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidConfig(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let ga = a.to_gray();
    let gb = b.to_gray();
    let kernel = gaussian_kernel();
    let l = 255.0;
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut mxx = 0.0;
            let mut myy = 0.0;
            let mut mxy = 0.0;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wgt = kernel[dy] * kernel[dx];
                    let pa = ga.get((x0 + dx) as u32, (y0 + dy) as u32, 0) as f64;
                    let pb = gb.get((x0 + dx) as u32, (y0 + dy) as u32, 0) as f64;
                    mx += wgt * pa;
                    my += wgt * pb;
                    mxx += wgt * pa * pa;
                    myy += wgt * pb * pb;
                    mxy += wgt * pa * pb;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cxy = mxy - mx * my;
            let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            let cs = (2.0 * cxy + c2) / (vx + vy + c2);
            total += lum * cs;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

// ---------------------------------------------------------------------------
// metric plugins

/// A candidate quality metric: one finite real per (reference, distorted)
/// pair, or per distorted image for no-reference metrics.
pub trait MetricPlugin: Send + Sync {
    fn name(&self) -> &str;
    fn full_reference(&self) -> bool {
        true
    }
    /// Orientation declared by the plugin; the harness aligns signs before
    /// correlating.
    fn higher_is_better(&self) -> bool;
    fn score(&self, reference: Option<&Raster>, distorted: &Raster) -> Result<f64>;
}

pub struct PsnrPlugin;

impl MetricPlugin for PsnrPlugin {
    fn name(&self) -> &str {
        "psnr"
    }
    fn higher_is_better(&self) -> bool {
        true
    }
    fn score(&self, reference: Option<&Raster>, distorted: &Raster) -> Result<f64> {
        let reference = reference.ok_or(Error::EmptyInput("psnr needs a reference"))?;
        psnr_from_rasters(reference, distorted, 8)
    }
}

pub struct SsimPlugin;

impl MetricPlugin for SsimPlugin {
    fn name(&self) -> &str {
        "ssim"
    }
    fn higher_is_better(&self) -> bool {
        true
    }
    fn score(&self, reference: Option<&Raster>, distorted: &Raster) -> Result<f64> {
        let reference = reference.ok_or(Error::EmptyInput("ssim needs a reference"))?;
        ssim(reference, distorted)
    }
}

/// The trained quality model exposed through the plugin interface.
pub struct ModelPlugin {
    pub model: TrainedModel,
    name: String,
}

impl ModelPlugin {
    pub fn new(model: TrainedModel) -> Self {
        let name = format!("model-{}", model.kind_str());
        Self { model, name }
    }
}

impl MetricPlugin for ModelPlugin {
    fn name(&self) -> &str {
        &self.name
    }

    fn full_reference(&self) -> bool {
        !matches!(self.model, TrainedModel::Plate(_))
    }

    fn higher_is_better(&self) -> bool {
        // detection and face models predict degradation deltas; the plate
        // model predicts recognition quality
        matches!(self.model, TrainedModel::Plate(_))
    }

    fn score(&self, reference: Option<&Raster>, distorted: &Raster) -> Result<f64> {
        match &self.model {
            TrainedModel::Detection(m) => {
                let reference = reference.ok_or(Error::EmptyInput("model needs a reference"))?;
                Ok(m.predict(reference, distorted)?.to_f64_lossy())
            }
            TrainedModel::Face(m) => {
                let reference = reference.ok_or(Error::EmptyInput("model needs a reference"))?;
                Ok(m.predict_pairs(&[(reference.clone(), distorted.clone())])?
                    .to_f64_lossy())
            }
            TrainedModel::Plate(m) => Ok(m.predict(distorted).to_f64_lossy()),
        }
    }
}

// ---------------------------------------------------------------------------
// harness

/// One scored unit: a (reference, distorted) crop pair with its target
/// degradation value.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub frame_id: String,
    pub object_id: Option<String>,
    pub codec: String,
    pub qf: i32,
    pub reference: Raster,
    pub distorted: Raster,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Correlate over all (object, variant) samples pooled together.
    PerObject,
    /// Average object scores and targets per (frame, variant) first.
    PerFrame,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub metric: String,
    pub task: Task,
    pub n: usize,
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub per_codec_srcc: BTreeMap<String, Option<f64>>,
    /// Orientation-aligned (metric, target) sample pairs for plotting.
    pub samples: Vec<(f64, f64)>,
    pub diagnostics: Vec<String>,
}

/// Scores every item with the plugin and correlates against the targets.
/// Signs are aligned first (both series oriented higher-is-better), so a
/// plugin reproducing the target correlates at exactly +1.
pub fn evaluate_metric(
    plugin: &dyn MetricPlugin,
    items: &[EvalItem],
    target_higher_is_better: bool,
    pooling: Pooling,
    task: Task,
) -> Result<CorrelationReport> {
    let scored: Vec<(usize, Result<f64>)> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let reference = plugin.full_reference().then_some(&item.reference);
            (i, plugin.score(reference, &item.distorted))
        })
        .collect();

    let mut diagnostics = Vec::new();
    let mut pairs: Vec<(usize, f64, f64)> = Vec::with_capacity(items.len());
    for (i, score) in scored {
        match score {
            Ok(s) if s.is_finite() => {
                let oriented_score = if plugin.higher_is_better() { s } else { -s };
                let oriented_target = if target_higher_is_better {
                    items[i].target
                } else {
                    -items[i].target
                };
                pairs.push((i, oriented_score, oriented_target));
            }
            Ok(s) => diagnostics.push(format!("item {i}: non-finite score {s}")),
            Err(e) => diagnostics.push(format!("item {i}: {e}")),
        }
    }

    let pooled: Vec<(String, f64, f64)> = match pooling {
        Pooling::PerObject => pairs
            .iter()
            .map(|(i, s, t)| (items[*i].codec.clone(), *s, *t))
            .collect(),
        Pooling::PerFrame => {
            let mut groups: BTreeMap<(String, String, i32), (f64, f64, usize)> = BTreeMap::new();
            for (i, s, t) in &pairs {
                let item = &items[*i];
                let entry = groups
                    .entry((item.frame_id.clone(), item.codec.clone(), item.qf))
                    .or_insert((0.0, 0.0, 0));
                entry.0 += s;
                entry.1 += t;
                entry.2 += 1;
            }
            groups
                .into_iter()
                .map(|((_, codec, _), (s, t, n))| (codec, s / n as f64, t / n as f64))
                .collect()
        }
    };

    let xs: Vec<f64> = pooled.iter().map(|(_, s, _)| *s).collect();
    let ys: Vec<f64> = pooled.iter().map(|(_, _, t)| *t).collect();
    let push_diag = |tag: &str, e: Error, diagnostics: &mut Vec<String>| {
        diagnostics.push(format!("{tag}: {e}"));
    };
    let srcc_value = match srcc(&xs, &ys) {
        Ok(v) => Some(v),
        Err(e) => {
            push_diag("srcc", e, &mut diagnostics);
            None
        }
    };
    let plcc_value = match plcc(&xs, &ys) {
        Ok(v) => Some(v),
        Err(e) => {
            push_diag("plcc", e, &mut diagnostics);
            None
        }
    };

    let mut per_codec_srcc = BTreeMap::new();
    let mut by_codec: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (codec, s, t) in &pooled {
        let entry = by_codec.entry(codec.clone()).or_default();
        entry.0.push(*s);
        entry.1.push(*t);
    }
    for (codec, (xs, ys)) in by_codec {
        per_codec_srcc.insert(codec, srcc(&xs, &ys).ok());
    }

    Ok(CorrelationReport {
        metric: plugin.name().to_string(),
        task,
        n: pooled.len(),
        srcc: srcc_value,
        plcc: plcc_value,
        per_codec_srcc,
        samples: pooled.into_iter().map(|(_, s, t)| (s, t)).collect(),
        diagnostics,
    })
}

/// Builds the scored units for one manifest from its crops and computed
/// targets. `target` picks which rows of the target file are joined.
pub fn build_eval_items(
    manifest: &Manifest,
    base_dir: &Path,
    targets: &[TargetRecord],
    target: TargetKind,
    crop_padding: f64,
) -> Result<Vec<EvalItem>> {
    let name = target.name();
    let mut lookup: BTreeMap<(&str, Option<&str>, &str, i32), f64> = BTreeMap::new();
    for r in targets {
        if r.target_name == name {
            lookup.insert(
                (r.frame_id.as_str(), r.object_id.as_deref(), r.codec.as_str(), r.qf),
                r.value,
            );
        }
    }
    let mut items = Vec::new();
    for record in &manifest.frames {
        let frame = manifest.resolve_frame(record, base_dir)?;
        if target == TargetKind::MeanIou {
            // whole-frame samples
            let source = frame.source.load()?;
            for variant in &frame.variants {
                let key = (record.source_id.as_str(), None, variant.codec.as_str(), variant.qf);
                if let Some(value) = lookup.get(&key) {
                    items.push(EvalItem {
                        frame_id: record.source_id.clone(),
                        object_id: None,
                        codec: variant.codec.clone(),
                        qf: variant.qf,
                        reference: source.clone(),
                        distorted: variant.image.load()?,
                        target: *value,
                    });
                }
            }
            continue;
        }
        let crops = crate::dataset::extract_crops(&frame, crop_padding)?;
        for object in &crops {
            let object_key: Option<String> = match target {
                TargetKind::FaceDelta => record.gt.person.clone(),
                _ => Some(object.object_id.clone()),
            };
            for vc in &object.variant_crops {
                let key = (
                    record.source_id.as_str(),
                    object_key.as_deref(),
                    vc.codec.as_str(),
                    vc.qf,
                );
                if let Some(value) = lookup.get(&key) {
                    items.push(EvalItem {
                        frame_id: record.source_id.clone(),
                        object_id: object_key.clone(),
                        codec: vc.codec.clone(),
                        qf: vc.qf,
                        reference: object.ref_crop.clone(),
                        distorted: vc.crop.clone(),
                        target: *value,
                    });
                }
            }
        }
    }
    Ok(items)
}

// ---------------------------------------------------------------------------
// report files

fn format_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

pub fn report_csv(reports: &[CorrelationReport]) -> String {
    let mut rows: Vec<&CorrelationReport> = reports.iter().collect();
    rows.sort_by(|a, b| {
        a.task
            .as_str()
            .cmp(b.task.as_str())
            .then(
                b.srcc
                    .unwrap_or(f64::NEG_INFINITY)
                    .partial_cmp(&a.srcc.unwrap_or(f64::NEG_INFINITY))
                    .expect("finite"),
            )
            .then(a.metric.cmp(&b.metric))
    });
    let mut out = String::from("metric,task,n,srcc,plcc,codec_breakdown_json\n");
    for r in rows {
        let breakdown =
            serde_json::to_string(&r.per_codec_srcc).expect("breakdown serializes");
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.metric,
            r.task.as_str(),
            r.n,
            format_opt(r.srcc),
            format_opt(r.plcc),
            csv_quote(&breakdown),
        ));
    }
    out
}

fn draw_text(img: &mut Raster, x: u32, y: u32, text: &str, value: &[u8]) {
    let mut cx = x;
    for ch in text.chars() {
        if font::glyph(ch).is_some() {
            for gy in 0..font::GLYPH_HEIGHT {
                for gx in 0..font::GLYPH_WIDTH {
                    if font::inked(ch, gx, gy) && cx + gx < img.width() && y + gy < img.height() {
                        for (c, v) in value.iter().enumerate() {
                            img.set(cx + gx, y + gy, c as u8, *v);
                        }
                    }
                }
            }
        }
        cx += font::GLYPH_WIDTH + 1;
    }
}

/// Deterministic bar chart of SRCC per metric, bars sorted descending.
pub fn draw_bar_chart(title: &str, entries: &[(String, Option<f64>)]) -> Raster {
    let slot = 72u32;
    let width = (entries.len() as u32 * slot + 60).max(320);
    let height = 260u32;
    let mut img = Raster::new(width, height, 3, 255);
    let ink = [20u8, 20, 20];
    let bar = [66u8, 104, 186];
    draw_text(&mut img, 8, 6, title, &ink);
    let baseline = 210u32;
    let max_bar = 160u32;
    // axis
    img.fill_rect(40, baseline, width - 10, baseline + 1, &ink);
    img.fill_rect(40, baseline - max_bar - 6, 41, baseline + 1, &ink);
    for (i, (name, srcc)) in entries.iter().enumerate() {
        let x0 = 50 + i as u32 * slot;
        match srcc {
            Some(v) => {
                let h = (v.clamp(0.0, 1.0) * max_bar as f64).round() as u32;
                img.fill_rect(x0, baseline - h.max(1), x0 + slot - 24, baseline, &bar);
                draw_text(&mut img, x0, baseline - h.max(1) - 12, &format!("{v:.2}"), &ink);
            }
            None => draw_text(&mut img, x0, baseline - 12, "N/A", &ink),
        }
        let label: String = name.chars().take(10).collect();
        draw_text(&mut img, x0, baseline + 6, &label, &ink);
    }
    img
}

/// Writes report.csv, report.json and one SRCC bar chart per task under
/// `out_dir`; returns the created paths. File content is a pure function
/// of the reports.
pub fn make_report(reports: &[CorrelationReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut created = Vec::new();

    let csv_path = out_dir.join("report.csv");
    crate::dataset::atomic_write(&csv_path, report_csv(reports).as_bytes())?;
    created.push(csv_path);

    let json_path = out_dir.join("report.json");
    let json = serde_json::to_vec_pretty(&reports)
        .map_err(|e| Error::ManifestFormat { line: 0, message: e.to_string() })?;
    crate::dataset::atomic_write(&json_path, &json)?;
    created.push(json_path);

    let mut tasks: Vec<Task> = reports.iter().map(|r| r.task).collect();
    tasks.sort_by_key(|t| t.as_str());
    tasks.dedup();
    for task in tasks {
        let mut entries: Vec<(String, Option<f64>)> = reports
            .iter()
            .filter(|r| r.task == task)
            .map(|r| (r.metric.clone(), r.srcc))
            .collect();
        entries.sort_by(|a, b| {
            b.1.unwrap_or(f64::NEG_INFINITY)
                .partial_cmp(&a.1.unwrap_or(f64::NEG_INFINITY))
                .expect("finite")
                .then(a.0.cmp(&b.0))
        });
        let chart = draw_bar_chart(&format!("SRCC {}", task.as_str()), &entries);
        let path = out_dir.join(format!("srcc_{}.png", task.as_str()));
        crate::dataset::atomic_write(&path, &chart.encode_png()?)?;
        created.push(path);
    }
    Ok(created)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn srcc_monotone_and_reversed() {
        assert_eq!(srcc(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(srcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    #[test]
    fn srcc_partial_agreement() {
        // 1 - 6*2/(4*15) = 0.8
        let got = srcc(&[1.0f64, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((got - 0.8).abs() < 1e-12);
    }

    #[test]
    fn plcc_affine_and_hand_value() {
        assert!((plcc(&[0.0f64, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((plcc(&[0.0f64, 1.0, 2.0], &[0.0, -1.0, -2.0]).unwrap() + 1.0).abs() < 1e-12);
        let got = plcc(&[0.0f64, 1.0, 2.0], &[0.0, 1.0, 4.0]).unwrap();
        assert!((got - 12.0 / 156f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_series_is_undefined() {
        assert!(matches!(
            srcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::ConstantSeries { .. })
        ));
        assert!(matches!(
            plcc(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]),
            Err(Error::ConstantSeries { .. })
        ));
        assert!(matches!(srcc(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::TooFewSamples(2))));
    }

    #[test]
    fn ranks_average_ties() {
        let ranks = average_ranks(&[10.0, 20.0, 20.0, 30.0]);
        assert_eq!(ranks, vec![1.0, 2.5, 2.5, 4.0]);
    }

    fn textured_card(seed: u64) -> Raster {
        Raster::new(48, 48, 1, 128).with_noise(40.0, seed)
    }

    #[test]
    fn ssim_identical_is_one() {
        let img = textured_card(1);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_inverted_card_is_negative() {
        let img = textured_card(2);
        let inverted = Raster::from_parts(
            img.width(),
            img.height(),
            1,
            img.data().iter().map(|v| 255 - v).collect(),
        );
        assert!(ssim(&img, &inverted).unwrap() < 0.0);
    }

    /// Direct per-window SSIM oracle, written independently from the main
    /// path (recomputes weighted moments from definition each window).
    fn ssim_oracle(a: &Raster, b: &Raster) -> f64 {
        let ga = a.to_gray();
        let gb = b.to_gray();
        let (w, h) = (a.width() as usize, a.height() as usize);
        let c = (SSIM_WINDOW / 2) as f64;
        let mut weights = Vec::new();
        let mut sum = 0.0;
        for dy in 0..SSIM_WINDOW {
            for dx in 0..SSIM_WINDOW {
                let g = (-(((dy as f64 - c).powi(2) + (dx as f64 - c).powi(2))
                    / (2.0 * SSIM_SIGMA * SSIM_SIGMA)))
                    .exp();
                weights.push(g);
                sum += g;
            }
        }
        for wgt in &mut weights {
            *wgt /= sum;
        }
        let c1 = (SSIM_K1 * 255.0).powi(2);
        let c2 = (SSIM_K2 * 255.0).powi(2);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let mut mx = 0.0;
                let mut my = 0.0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = weights[dy * SSIM_WINDOW + dx];
                        mx += wgt * ga.get((x0 + dx) as u32, (y0 + dy) as u32, 0) as f64;
                        my += wgt * gb.get((x0 + dx) as u32, (y0 + dy) as u32, 0) as f64;
                    }
                }
                let mut vx = 0.0;
                let mut vy = 0.0;
                let mut cxy = 0.0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = weights[dy * SSIM_WINDOW + dx];
                        let pa = ga.get((x0 + dx) as u32, (y0 + dy) as u32, 0) as f64 - mx;
                        let pb = gb.get((x0 + dx) as u32, (y0 + dy) as u32, 0) as f64 - my;
                        vx += wgt * pa * pa;
                        vy += wgt * pb * pb;
                        cxy += wgt * pa * pb;
                    }
                }
                total += ((2.0 * mx * my + c1) / (mx * mx + my * my + c1))
                    * ((2.0 * cxy + c2) / (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        let a = textured_card(3);
        let b = a.gaussian_blur(1.2);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn csv_for_empty_reports_is_header_only() {
        assert_eq!(report_csv(&[]), "metric,task,n,srcc,plcc,codec_breakdown_json\n");
    }

    proptest! {
        #[test]
        fn srcc_invariant_under_increasing_transforms(
            xs in proptest::collection::vec(-50.0f64..50.0, 5..20),
            ys in proptest::collection::vec(-50.0f64..50.0, 5..20),
        ) {
            let n = xs.len().min(ys.len());
            let (xs, ys) = (&xs[..n], &ys[..n]);
            if let Ok(base) = srcc(xs, ys) {
                let ex: Vec<f64> = xs.iter().map(|v| (v / 10.0).exp()).collect();
                let cy: Vec<f64> = ys.iter().map(|v| v.powi(3)).collect();
                let transformed = srcc(&ex, &cy).unwrap();
                prop_assert!((base - transformed).abs() < 1e-12);
            }
        }

        #[test]
        fn plcc_invariant_under_positive_affine(
            xs in proptest::collection::vec(-50.0f64..50.0, 5..20),
            ys in proptest::collection::vec(-50.0f64..50.0, 5..20),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let n = xs.len().min(ys.len());
            let (xs, ys) = (&xs[..n], &ys[..n]);
            if let Ok(base) = plcc(xs, ys) {
                let ax: Vec<f64> = xs.iter().map(|v| a * v + b).collect();
                let transformed = plcc(&ax, ys).unwrap();
                prop_assert!((base - transformed).abs() < 1e-9);
            }
        }
    }
}
