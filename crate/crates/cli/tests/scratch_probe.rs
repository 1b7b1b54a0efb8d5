//! Temporary probe: inspect synthetic-oracle degradation behavior under
//! the JPEG sweep before freezing acceptance thresholds.

use mvq_cli::{run_stage, RunConfig};
use mvq_core::train::{read_target_records, TargetKind};
use mvq_cli::RunPaths;
use std::collections::BTreeMap;

fn config(task: &str, out: &str, count: usize) -> RunConfig {
    let toml = format!(
        r#"
task = "{task}"
seed = 7
out = "{out}"

[corpus]
count = {count}
width = 192
height = 128

[[codecs]]
name = "jpeg"
grid = [10, 30, 50, 70, 90]

[label]
min_gap = 1
"#
    );
    toml::from_str(&toml).unwrap()
}

fn per_qf_means(records: &[mvq_core::train::TargetRecord], name: &str) -> BTreeMap<i32, (f64, usize)> {
    let mut acc: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.target_name == name) {
        let e = acc.entry(r.qf).or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    acc
}

#[test]
fn probe_object_detection_degradation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = config("object", out.to_str().unwrap(), 20);
    run_stage(&cfg, "sweep").unwrap();
    run_stage(&cfg, "label").unwrap();
    run_stage(&cfg, "targets").unwrap();
    let paths = RunPaths::new(&out);

    let manifest = mvq_core::dataset::Manifest::read(&paths.labeled()).unwrap();
    let mut psnr: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for f in &manifest.frames {
        for v in &f.variants {
            let e = psnr.entry(v.qf).or_insert((0.0, 0));
            e.0 += v.psnr_db;
            e.1 += 1;
        }
    }
    println!("frames labeled: {}", manifest.frames.len());
    for (qf, (s, n)) in &psnr {
        println!("qf {qf}: mean psnr {:.3} over {n}", s / *n as f64);
    }

    let records = read_target_records(&paths.targets()).unwrap();
    for (qf, (s, n)) in per_qf_means(&records, TargetKind::DeltaObjectIou.name()) {
        println!("qf {qf}: mean delta-iou {:.5} over {n}", s / n as f64);
    }
    let deltas: Vec<f64> = records
        .iter()
        .filter(|r| r.target_name == "delta_object_iou")
        .map(|r| r.value)
        .collect();
    let distinct: std::collections::BTreeSet<String> =
        deltas.iter().map(|v| format!("{v:.4}")).collect();
    println!("delta samples: {}, distinct(4dp): {}", deltas.len(), distinct.len());
}

#[test]
fn probe_plate_degradation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = config("plate", out.to_str().unwrap(), 20);
    run_stage(&cfg, "sweep").unwrap();
    let label = run_stage(&cfg, "label").unwrap();
    println!("label counts: {:?}", label.counts);
    run_stage(&cfg, "targets").unwrap();
    let paths = RunPaths::new(&out);
    let manifest = mvq_core::dataset::Manifest::read(&paths.labeled()).unwrap();
    println!("frames labeled: {}", manifest.frames.len());
    let records = read_target_records(&paths.targets()).unwrap();
    for (qf, (s, n)) in per_qf_means(&records, TargetKind::Jaro.name()) {
        println!("qf {qf}: mean jaro {:.5} over {n}", s / n as f64);
    }
    // why are frames dropped at autolabel? inspect each clean frame
    use mvq_core::backends::{plate_scene, DetectorBackend, PlateRecognizer, SyntheticDetector, SyntheticPlateReader};
    use mvq_core::types::ImageRef;
    let detector = SyntheticDetector::plates();
    let reader = SyntheticPlateReader::default();
    for i in 0..20u64 {
        let seed = cfg.seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let (img, det, gt) = plate_scene(seed, 192, 128);
        let r = ImageRef::from_raster(img.clone());
        let dets = detector.detect(&r).unwrap();
        let best = dets.iter().map(|d| d.confidence).fold(0.0, f64::max);
        let crop = img.crop(
            det.bbox.x_min as u32,
            det.bbox.y_min as u32,
            det.bbox.x_max as u32,
            det.bbox.y_max as u32,
        );
        let read = reader.recognize(&ImageRef::from_raster(crop)).unwrap();
        println!(
            "frame {i}: gt {:?} w={} det_conf {:.3} read {:?} conf {:.3}",
            gt.chars,
            det.bbox.width(),
            best,
            read.chars,
            read.confidence
        );
    }
}

#[test]
fn probe_face_degradation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = config("face", out.to_str().unwrap(), 20);
    run_stage(&cfg, "sweep").unwrap();
    run_stage(&cfg, "label").unwrap();
    run_stage(&cfg, "targets").unwrap();
    let paths = RunPaths::new(&out);
    let manifest = mvq_core::dataset::Manifest::read(&paths.labeled()).unwrap();
    println!("frames labeled: {}", manifest.frames.len());
    let records = read_target_records(&paths.targets()).unwrap();
    for (qf, (s, n)) in per_qf_means(&records, TargetKind::FaceDelta.name()) {
        println!("qf {qf}: mean face-delta {:.6} over {n}", s / n as f64);
    }
}

#[test]
fn probe_oracle_confidence_monotone() {
    use mvq_core::backends::{detection_scene, DetectorBackend, SyntheticDetector};
    use mvq_core::types::{iou, ImageRef};
    let (card, gt) = detection_scene(99, 96, 96, 1);
    let truth = &gt[0].bbox;
    let detector = SyntheticDetector::objects();
    for qf in [10, 30, 50, 70, 90] {
        let bytes = card.encode_jpeg(qf).unwrap();
        let decoded = mvq_core::raster::Raster::decode(&bytes).unwrap();
        let dets = detector.detect(&ImageRef::from_raster(decoded)).unwrap();
        let best = dets
            .iter()
            .max_by(|a, b| iou(&a.bbox, truth).partial_cmp(&iou(&b.bbox, truth)).unwrap());
        match best {
            Some(d) => println!(
                "qf {qf}: conf {:.4}, iou {:.4}, n={}",
                d.confidence,
                iou(&d.bbox, truth),
                dets.len()
            ),
            None => println!("qf {qf}: no detection"),
        }
    }
}

#[test]
fn probe_dedup_directly() {
    use mvq_core::backends::{plate_scene, DetectorBackend, SyntheticDetector, SyntheticPlateReader, PlateRecognizer};
    use mvq_core::dataset::{autolabel_indices, dedup_plate_indices, crop_rect};
    use mvq_core::types::ImageRef;
    let detector = SyntheticDetector::plates();
    let reader = SyntheticPlateReader::default();
    let sources: Vec<ImageRef> = (0..20u64)
        .map(|i| {
            let seed = 7u64 ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            ImageRef::from_raster(plate_scene(seed, 192, 128).0)
        })
        .collect();
    let selected = autolabel_indices(&sources, &detector, 0.7, 1).unwrap();
    println!("autolabeled: {}", selected.len());
    for (idx, dets) in &selected {
        let src = &sources[*idx];
        let raster = src.load().unwrap();
        for det in dets {
            let (x0, y0, x1, y1) = crop_rect(&det.bbox, 0.0, src.width, src.height);
            let crop = raster.crop(x0, y0, x1, y1);
            let read = reader.recognize(&ImageRef::from_raster(crop)).unwrap();
            println!(
                "frame {idx}: box ({:.1},{:.1},{:.1},{:.1}) conf {} read {:?} rconf {} empty {}",
                det.bbox.x_min, det.bbox.y_min, det.bbox.x_max, det.bbox.y_max,
                det.confidence, read.chars, read.confidence, read.is_empty()
            );
        }
    }
    let with_boxes: Vec<_> = selected
        .iter()
        .map(|(idx, dets)| (sources[*idx].clone(), dets.clone()))
        .collect();
    let deduped = dedup_plate_indices(&with_boxes, &reader, 1).unwrap();
    println!("deduped kept: {}", deduped.len());
}
