//! The pipeline stages behind the CLI subcommands. Every stage reads its
//! predecessor's files, writes its own outputs atomically, and drops a
//! machine-readable summary JSON next to them.

use crate::config::{CorpusKind, RunConfig};
use anyhow::{anyhow, bail, Context, Result};
use mvq_core::backends::{
    detection_scene, face_image, plate_scene, CommandDetector, CommandEmbedder,
    CommandPlateReader, DetectorBackend, FaceEmbedder, PlateRecognizer, SyntheticDetector,
    SyntheticEmbedder, SyntheticPlateReader,
};
use mvq_core::dataset::{
    atomic_write, autolabel_indices, calibrate_quality_grid, compute_psnr, dedup_plate_indices,
    encode_variant, select_face_pairs, CodecSpec, FrameRecord, GtRecord, Manifest, PsnrHistogram,
    VariantRecord,
};
use mvq_core::eval::{
    build_eval_items, evaluate_metric, make_report, CorrelationReport, MetricPlugin, ModelPlugin,
    PsnrPlugin, SsimPlugin,
};
use mvq_core::matching::MatchOptions;
use mvq_core::train::{
    compute_targets, make_splits, read_target_records, train_model, write_target_records,
    Backends, TargetOptions, TrainedModel,
};
use mvq_core::types::{Alphabet, ImageRef, Task};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// File layout of one run directory.
pub struct RunPaths {
    pub out: PathBuf,
}

impl RunPaths {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.out.join("manifest.jsonl")
    }

    pub fn labeled(&self) -> PathBuf {
        self.out.join("labeled.jsonl")
    }

    pub fn split_manifest(&self) -> PathBuf {
        self.out.join("train_manifest.jsonl")
    }

    pub fn targets(&self) -> PathBuf {
        self.out.join("targets.jsonl")
    }

    pub fn model_best(&self) -> PathBuf {
        self.out.join("model.json")
    }

    pub fn model_final(&self) -> PathBuf {
        self.out.join("model_final.json")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.out.join("checkpoints")
    }

    pub fn train_log(&self) -> PathBuf {
        self.out.join("train_log.csv")
    }

    pub fn reports(&self) -> PathBuf {
        self.out.join("reports.json")
    }

    pub fn summary(&self, stage: &str) -> PathBuf {
        self.out.join(format!("{stage}_summary.json"))
    }
}

#[derive(Debug, Serialize)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub counts: BTreeMap<String, serde_json::Value>,
}

impl StageOutcome {
    fn new(stage: &'static str) -> Self {
        Self {
            stage,
            counts: BTreeMap::new(),
        }
    }

    fn set(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.counts.insert(key.to_string(), value.into());
    }
}

/// Runs one stage and writes `{stage}_summary.json` with counts, seed,
/// duration and tool version.
pub fn run_stage(cfg: &RunConfig, stage: &str) -> Result<StageOutcome> {
    let started = Instant::now();
    let outcome = match stage {
        "sweep" => stage_sweep(cfg)?,
        "label" => stage_label(cfg)?,
        "targets" => stage_targets(cfg)?,
        "train" => stage_train(cfg)?,
        "eval" => stage_eval(cfg)?,
        "report" => stage_report(cfg)?,
        other => bail!("unknown stage {other:?}"),
    };
    let paths = RunPaths::new(cfg.out_dir());
    let summary = json!({
        "stage": outcome.stage,
        "tool_version": TOOL_VERSION,
        "schema_version": mvq_core::SCHEMA_VERSION,
        "seed": cfg.seed,
        "duration_secs": started.elapsed().as_secs_f64(),
        "counts": outcome.counts,
    });
    atomic_write(
        &paths.summary(outcome.stage),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(outcome)
}

pub fn run_all(cfg: &RunConfig) -> Result<Vec<StageOutcome>> {
    ["sweep", "label", "targets", "train", "eval", "report"]
        .iter()
        .map(|stage| {
            let outcome = run_stage(cfg, stage)?;
            println!(
                "[{}] done: {}",
                outcome.stage,
                serde_json::to_string(&outcome.counts).unwrap_or_default()
            );
            Ok(outcome)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// backends from config

fn mix_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn make_detector(cfg: &RunConfig) -> Result<Box<dyn DetectorBackend>> {
    Ok(match cfg.label.backend.as_str() {
        "synthetic" => Box::new(match cfg.task {
            Task::Object => SyntheticDetector::objects(),
            Task::Face => SyntheticDetector::faces(),
            Task::Plate => SyntheticDetector::plates(),
        }),
        "command" => {
            let template = cfg
                .label
                .detect_cmd
                .as_ref()
                .ok_or_else(|| anyhow!("label.detect_cmd missing"))?;
            Box::new(CommandDetector::new("command-detector", cfg.task, template))
        }
        other => bail!("unknown backend {other:?}"),
    })
}

pub fn make_embedder(cfg: &RunConfig) -> Result<Box<dyn FaceEmbedder>> {
    Ok(match cfg.label.backend.as_str() {
        "synthetic" => Box::new(SyntheticEmbedder::new(cfg.label.embed_dim, cfg.label.embed_seed)),
        "command" => {
            let template = cfg
                .label
                .embed_cmd
                .as_ref()
                .ok_or_else(|| anyhow!("label.embed_cmd missing"))?;
            Box::new(CommandEmbedder::new(
                "command-embedder",
                cfg.label.embed_dim,
                template,
            ))
        }
        other => bail!("unknown backend {other:?}"),
    })
}

pub fn make_recognizer(cfg: &RunConfig) -> Result<Box<dyn PlateRecognizer>> {
    Ok(match cfg.label.backend.as_str() {
        "synthetic" => Box::new(SyntheticPlateReader::default()),
        "command" => {
            let template = cfg
                .label
                .recognize_cmd
                .as_ref()
                .ok_or_else(|| anyhow!("label.recognize_cmd missing"))?;
            Box::new(CommandPlateReader::new(
                "command-plate-reader",
                Alphabet::default(),
                template,
            ))
        }
        other => bail!("unknown backend {other:?}"),
    })
}

// ---------------------------------------------------------------------------
// sweep

struct SourceEntry {
    source_id: String,
    rel_path: String,
    width: u32,
    height: u32,
    person: Option<String>,
}

fn collect_sources(cfg: &RunConfig, out: &Path) -> Result<Vec<SourceEntry>> {
    match cfg.corpus.kind {
        CorpusKind::Synthetic => generate_synthetic_sources(cfg, out),
        CorpusKind::Directory => scan_directory_sources(cfg),
    }
}

fn generate_synthetic_sources(cfg: &RunConfig, out: &Path) -> Result<Vec<SourceEntry>> {
    let (w, h) = (cfg.corpus.width, cfg.corpus.height);
    let mut entries = Vec::new();
    let mut emit = |id: String, person: Option<String>, render: &dyn Fn() -> mvq_core::raster::Raster|
     -> Result<()> {
        let rel = format!("corpus/{}/{}/source.png", cfg.task.as_str(), id);
        let path = out.join(&rel);
        if !path.exists() {
            render().save_png(&path)?;
        }
        entries.push(SourceEntry {
            source_id: id,
            rel_path: rel,
            width: w,
            height: h,
            person,
        });
        Ok(())
    };
    match cfg.task {
        Task::Object => {
            for i in 0..cfg.corpus.count {
                let seed = mix_seed(cfg.seed, i as u64);
                let n = cfg.corpus.objects_per_frame;
                emit(format!("frame_{i:04}"), None, &|| {
                    detection_scene(seed, w, h, n).0
                })?;
            }
        }
        Task::Plate => {
            for i in 0..cfg.corpus.count {
                let seed = mix_seed(cfg.seed, i as u64);
                emit(format!("frame_{i:04}"), None, &|| plate_scene(seed, w, h).0)?;
            }
        }
        Task::Face => {
            for p in 0..cfg.corpus.count {
                let person_seed = mix_seed(cfg.seed, 1_000_000 + p as u64);
                let person = format!("p{p:03}");
                for v in 0..cfg.corpus.images_per_person {
                    emit(
                        format!("{person}_{v}"),
                        Some(person.clone()),
                        &|| face_image(person_seed, v as u32, w, h).0,
                    )?;
                }
            }
        }
    }
    Ok(entries)
}

fn scan_directory_sources(cfg: &RunConfig) -> Result<Vec<SourceEntry>> {
    let dir = PathBuf::from(cfg.corpus.dir.as_ref().expect("validated"));
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![dir.clone()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).with_context(|| format!("reading {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(
                path.extension().and_then(|e| e.to_str()),
                Some("png") | Some("jpg") | Some("jpeg")
            ) {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut entries = Vec::new();
    for path in files {
        let rel = path.strip_prefix(&dir).unwrap_or(&path);
        let id = rel
            .with_extension("")
            .display()
            .to_string()
            .replace(['/', '\\', '.'], "_");
        let person = if cfg.task == Task::Face {
            rel.components()
                .next()
                .map(|c| c.as_os_str().to_string_lossy().to_string())
        } else {
            None
        };
        let image = ImageRef::open(&path)?;
        entries.push(SourceEntry {
            source_id: id,
            rel_path: path.display().to_string(),
            width: image.width,
            height: image.height,
            person,
        });
    }
    if entries.is_empty() {
        bail!("corpus directory {} holds no images", dir.display());
    }
    Ok(entries)
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn maybe_calibrate(
    cfg: &RunConfig,
    out: &Path,
    sources: &[SourceEntry],
    codecs: &mut [CodecSpec],
    outcome: &mut StageOutcome,
) -> Result<()> {
    let Some(name) = &cfg.sweep.calibrate_codec else {
        return Ok(());
    };
    let target_name = cfg.sweep.calibrate_target.clone().unwrap_or_else(|| "jpeg".into());
    let target_codec = codecs
        .iter()
        .find(|c| &c.name == &target_name)
        .cloned()
        .ok_or_else(|| anyhow!("calibration target codec {target_name:?} not configured"))?;
    let position = codecs
        .iter()
        .position(|c| &c.name == name)
        .ok_or_else(|| anyhow!("calibration codec {name:?} not configured"))?;
    let sample: Vec<ImageRef> = sources
        .iter()
        .take(cfg.sweep.calibrate_sample.max(1))
        .map(|s| {
            ImageRef::from_path_with_dims(resolve(out, &s.rel_path), s.width, s.height)
                .map_err(Into::into)
        })
        .collect::<Result<_>>()?;
    let scratch = out.join("calibration");
    std::fs::create_dir_all(&scratch)?;

    let edges = PsnrHistogram::uniform_edges(5.0, 65.0, 60);
    let probe_for = |codec: &CodecSpec| {
        let codec = codec.clone();
        let scratch = scratch.clone();
        let sample = sample.clone();
        move |idx: usize, qf: i32| -> mvq_core::Result<f64> {
            let path = scratch.join(format!("{}_{idx}_{qf}.{}", codec.name, codec.extension()));
            let variant = encode_variant(&sample[idx], &codec, qf, &path)?;
            compute_psnr(&sample[idx], &variant)
        }
    };

    let target_probe = probe_for(&target_codec);
    let mut target_samples = Vec::new();
    for &qf in &target_codec.grid {
        for idx in 0..sample.len() {
            target_samples.push(target_probe(idx, qf)?);
        }
    }
    let target_hist = PsnrHistogram::from_samples(&target_samples, edges);

    let codec = codecs[position].clone();
    let (lo, hi) = codec.qf_range;
    let step = (((hi - lo) as usize / 63).max(1)) as i32;
    let candidates: Vec<i32> = (lo..=hi).step_by(step as usize).collect();
    let probe = probe_for(&codec);
    let mut probe_fn = |idx: usize, qf: i32| probe(idx, qf);
    let calibration = calibrate_quality_grid(
        &mut probe_fn,
        sample.len(),
        &candidates,
        &codec.grid,
        &target_hist,
    )?;
    outcome.set("calibrated_codec", name.clone());
    outcome.set(
        "calibrated_grid",
        serde_json::to_value(&calibration.grid)?,
    );
    outcome.set("calibration_distance", calibration.distance);
    if !calibration.warnings.is_empty() {
        outcome.set("calibration_warnings", serde_json::to_value(&calibration.warnings)?);
    }
    codecs[position].grid = calibration.grid;
    Ok(())
}

pub fn stage_sweep(cfg: &RunConfig) -> Result<StageOutcome> {
    let out = cfg.out_dir();
    let paths = RunPaths::new(&out);
    std::fs::create_dir_all(&out)?;
    let mut outcome = StageOutcome::new("sweep");

    let sources = collect_sources(cfg, &out)?;
    let mut codecs: Vec<CodecSpec> = cfg
        .codecs
        .iter()
        .map(|c| c.to_spec().map_err(Into::into))
        .collect::<Result<_>>()?;
    maybe_calibrate(cfg, &out, &sources, &mut codecs, &mut outcome)?;

    struct Job {
        source: usize,
        codec: usize,
        qf: i32,
    }
    let jobs: Vec<Job> = sources
        .iter()
        .enumerate()
        .flat_map(|(si, _)| {
            codecs.iter().enumerate().flat_map(move |(ci, codec)| {
                codec.grid.iter().map(move |&qf| Job {
                    source: si,
                    codec: ci,
                    qf,
                })
            })
        })
        .collect();

    let results: Vec<(usize, std::result::Result<(VariantRecord, bool), String>)> = jobs
        .par_iter()
        .enumerate()
        .map(|(ji, job)| {
            let source = &sources[job.source];
            let codec = &codecs[job.codec];
            let run = || -> Result<(VariantRecord, bool)> {
                let src_ref = ImageRef::from_path_with_dims(
                    resolve(&out, &source.rel_path),
                    source.width,
                    source.height,
                )?;
                let rel = format!(
                    "corpus/{}/{}/{}_{}.{}",
                    cfg.task.as_str(),
                    source.source_id,
                    codec.name,
                    job.qf,
                    codec.extension()
                );
                let path = out.join(&rel);
                let (variant, fresh) = if path.exists() {
                    (ImageRef::open(&path)?, false)
                } else {
                    (encode_variant(&src_ref, codec, job.qf, &path)?, true)
                };
                let psnr_db = compute_psnr(&src_ref, &variant)?;
                let rel_path = variant
                    .path()
                    .and_then(|p| p.strip_prefix(&out).ok())
                    .map(|p| p.display().to_string())
                    .unwrap_or(rel);
                Ok((
                    VariantRecord {
                        codec: codec.name.clone(),
                        qf: job.qf,
                        path: rel_path,
                        psnr_db,
                    },
                    fresh,
                ))
            };
            (ji, run().map_err(|e| format!("{}: {e}", codec.name)))
        })
        .collect();

    let mut variants_by_source: Vec<Vec<VariantRecord>> = vec![Vec::new(); sources.len()];
    let mut new_encodes = 0usize;
    let mut reused = 0usize;
    let mut failures: Vec<String> = Vec::new();
    for (ji, result) in results {
        let job = &jobs[ji];
        match result {
            Ok((record, fresh)) => {
                if fresh {
                    new_encodes += 1;
                } else {
                    reused += 1;
                }
                variants_by_source[job.source].push(record);
            }
            Err(message) => {
                if codecs[job.codec].name == "jpeg" {
                    bail!("mandatory jpeg codec failed: {message}");
                }
                failures.push(message);
            }
        }
    }

    let frames: Vec<FrameRecord> = sources
        .iter()
        .zip(variants_by_source)
        .map(|(s, variants)| FrameRecord {
            schema_version: mvq_core::SCHEMA_VERSION,
            task: cfg.task,
            source_id: s.source_id.clone(),
            source_path: s.rel_path.clone(),
            width: s.width,
            height: s.height,
            gt: GtRecord {
                person: s.person.clone(),
                ..GtRecord::default()
            },
            variants,
            split: None,
            seed: cfg.seed,
        })
        .collect();
    let manifest = Manifest { frames };
    manifest.validate()?;
    manifest.write(&paths.manifest())?;

    outcome.set("sources", sources.len());
    outcome.set("variants", manifest.frames.iter().map(|f| f.variants.len()).sum::<usize>());
    outcome.set("new_encodes", new_encodes);
    outcome.set("reused_encodes", reused);
    if !failures.is_empty() {
        outcome.set("codec_failures", serde_json::to_value(&failures)?);
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// label

pub fn stage_label(cfg: &RunConfig) -> Result<StageOutcome> {
    let out = cfg.out_dir();
    let paths = RunPaths::new(&out);
    let manifest = Manifest::read(&paths.manifest())?;
    let mut outcome = StageOutcome::new("label");

    let labeled = match cfg.task {
        Task::Object => label_detection(cfg, &out, &manifest, &mut outcome)?,
        Task::Plate => label_plates(cfg, &out, &manifest, &mut outcome)?,
        Task::Face => label_faces(cfg, &out, &manifest, &mut outcome)?,
    };
    labeled.validate()?;
    labeled.write(&paths.labeled())?;
    outcome.set("frames_in", manifest.frames.len());
    outcome.set("frames_labeled", labeled.frames.len());
    Ok(outcome)
}

fn source_refs(manifest: &Manifest, base: &Path) -> Result<Vec<ImageRef>> {
    manifest
        .frames
        .iter()
        .map(|f| {
            ImageRef::from_path_with_dims(resolve(base, &f.source_path), f.width, f.height)
                .map_err(Into::into)
        })
        .collect()
}

fn label_detection(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Manifest,
    outcome: &mut StageOutcome,
) -> Result<Manifest> {
    let detector = make_detector(cfg)?;
    let sources = source_refs(manifest, out)?;
    let selected = autolabel_indices(
        &sources,
        detector.as_ref(),
        cfg.label.confidence_threshold,
        cfg.label.min_gap,
    )?;
    outcome.set("detections", selected.iter().map(|(_, d)| d.len()).sum::<usize>());
    let frames = selected
        .into_iter()
        .map(|(idx, dets)| {
            let mut record = manifest.frames[idx].clone();
            record.gt.boxes = dets;
            record
        })
        .collect();
    Ok(Manifest { frames })
}

fn label_plates(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Manifest,
    outcome: &mut StageOutcome,
) -> Result<Manifest> {
    let detector = make_detector(cfg)?;
    let recognizer = make_recognizer(cfg)?;
    let sources = source_refs(manifest, out)?;
    let selected = autolabel_indices(
        &sources,
        detector.as_ref(),
        cfg.label.confidence_threshold,
        cfg.label.min_gap,
    )?;
    outcome.set("autolabeled", selected.len());
    let with_boxes: Vec<(ImageRef, Vec<mvq_core::Detection<f64>>)> = selected
        .iter()
        .map(|(idx, dets)| (sources[*idx].clone(), dets.clone()))
        .collect();
    let deduped = dedup_plate_indices(
        &with_boxes,
        recognizer.as_ref(),
        cfg.label.max_plate_distance,
    )?;
    outcome.set("dedup_dropped", selected.len() - deduped.len());
    let frames = deduped
        .into_iter()
        .map(|(pos, strings)| {
            let (idx, dets) = &selected[pos];
            let mut record = manifest.frames[*idx].clone();
            record.gt.boxes = dets.clone();
            record.gt.strings = strings.iter().map(|s| s.chars.clone()).collect();
            record
        })
        .collect();
    Ok(Manifest { frames })
}

fn label_faces(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Manifest,
    outcome: &mut StageOutcome,
) -> Result<Manifest> {
    let detector = make_detector(cfg)?;
    let mut persons: BTreeMap<String, Vec<ImageRef>> = BTreeMap::new();
    let mut by_path: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, record) in manifest.frames.iter().enumerate() {
        let Some(person) = &record.gt.person else {
            continue;
        };
        let image =
            ImageRef::from_path_with_dims(resolve(out, &record.source_path), record.width, record.height)?;
        if let Some(p) = image.path() {
            by_path.insert(p.display().to_string(), idx);
        }
        persons.entry(person.clone()).or_default().push(image);
    }
    let selection = select_face_pairs(&persons, detector.as_ref(), cfg.seed)?;
    outcome.set("persons", persons.len());
    outcome.set("skipped_persons", selection.skipped_persons);

    let record_of = |image: &ImageRef| -> Result<usize> {
        let path = image
            .path()
            .ok_or_else(|| anyhow!("face image without a path"))?
            .display()
            .to_string();
        by_path
            .get(&path)
            .copied()
            .ok_or_else(|| anyhow!("selected image {path} not in manifest"))
    };

    let mut frames = Vec::new();
    for pair in &selection.pairs {
        let q_idx = record_of(&pair.query)?;
        let db_idx = record_of(&pair.database)?;
        let mut record = manifest.frames[q_idx].clone();
        record.gt.boxes = vec![pair.query_box];
        record.gt.person = Some(pair.person.clone());
        record.gt.database_path = Some(manifest.frames[db_idx].source_path.clone());
        record.gt.database_box = Some(pair.database_box);
        frames.push(record);
    }
    Ok(Manifest { frames })
}

// ---------------------------------------------------------------------------
// targets

pub fn stage_targets(cfg: &RunConfig) -> Result<StageOutcome> {
    let out = cfg.out_dir();
    let paths = RunPaths::new(&out);
    let manifest = Manifest::read(&paths.labeled())?;
    let mut outcome = StageOutcome::new("targets");

    let detector = make_detector(cfg)?;
    let embedder = if cfg.task == Task::Face {
        Some(make_embedder(cfg)?)
    } else {
        None
    };
    let recognizer = if cfg.task == Task::Plate {
        Some(make_recognizer(cfg)?)
    } else {
        None
    };
    let backends = Backends {
        detector: Some(detector.as_ref()),
        embedder: embedder.as_deref(),
        recognizer: recognizer.as_deref(),
    };
    let opts = TargetOptions {
        match_options: MatchOptions {
            threshold: cfg.targets.match_threshold,
            class_aware: cfg.targets.class_aware,
        },
    };
    let computed = compute_targets(&manifest, &out, &backends, &opts)?;
    write_target_records(&paths.targets(), &computed.records)?;
    outcome.set("records", computed.records.len());
    outcome.set("failures", computed.failures.len());
    if !computed.failures.is_empty() {
        outcome.set("failure_messages", serde_json::to_value(&computed.failures)?);
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// train

pub fn stage_train(cfg: &RunConfig) -> Result<StageOutcome> {
    let out = cfg.out_dir();
    let paths = RunPaths::new(&out);
    let manifest = Manifest::read(&paths.labeled())?;
    let mut outcome = StageOutcome::new("train");

    let split_manifest = make_splits(manifest, cfg.train.split, cfg.seed)?;
    split_manifest.write(&paths.split_manifest())?;

    let train_cfg = cfg.train_config()?;
    let targets = read_target_records(&paths.targets())?;
    let result = train_model(&train_cfg, &split_manifest, &out, &targets)?;

    std::fs::create_dir_all(paths.checkpoints_dir())?;
    for checkpoint in &result.checkpoints {
        atomic_write(
            &paths
                .checkpoints_dir()
                .join(format!("epoch_{:03}.model.json", checkpoint.epoch)),
            &checkpoint.model,
        )?;
    }
    atomic_write(&paths.train_log(), result.log_csv.as_bytes())?;
    atomic_write(&paths.model_best(), &result.checkpoints[result.best_epoch].model)?;
    atomic_write(
        &paths.model_final(),
        &result.checkpoints.last().expect("at least init checkpoint").model,
    )?;

    outcome.set("epochs", result.checkpoints.len() - 1);
    outcome.set("best_epoch", result.best_epoch);
    outcome.set(
        "final_train_loss",
        result.checkpoints.last().unwrap().train_loss,
    );
    if let Some(srcc) = result.checkpoints[result.best_epoch].val_srcc {
        outcome.set("best_val_srcc", srcc);
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// eval

pub fn stage_eval(cfg: &RunConfig) -> Result<StageOutcome> {
    let out = cfg.out_dir();
    let paths = RunPaths::new(&out);
    let manifest = Manifest::read(&paths.labeled())?;
    let targets = read_target_records(&paths.targets())?;
    let mut outcome = StageOutcome::new("eval");

    let target_kind = cfg.eval_target();
    let items = build_eval_items(
        &manifest,
        &out,
        &targets,
        target_kind,
        cfg.train.crop_padding,
    )?;
    outcome.set("items", items.len());

    let mut plugins: Vec<Box<dyn MetricPlugin>> = Vec::new();
    if paths.model_best().exists() {
        let model = TrainedModel::load(cfg.train_target().model_kind(), &paths.model_best())?;
        plugins.push(Box::new(ModelPlugin::new(model)));
    } else {
        outcome.set("model_row", "skipped: model.json not found");
    }
    for name in &cfg.eval.plugins {
        match name.as_str() {
            "psnr" => plugins.push(Box::new(PsnrPlugin)),
            "ssim" => plugins.push(Box::new(SsimPlugin)),
            other => bail!("unknown metric plugin {other:?}"),
        }
    }

    let reports: Vec<CorrelationReport> = plugins
        .iter()
        .map(|p| {
            evaluate_metric(
                p.as_ref(),
                &items,
                target_kind.higher_is_better(),
                cfg.eval.pooling,
                cfg.task,
            )
            .map_err(Into::into)
        })
        .collect::<Result<_>>()?;
    atomic_write(&paths.reports(), serde_json::to_string_pretty(&reports)?.as_bytes())?;
    outcome.set("metrics", reports.len());
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// report

pub fn stage_report(cfg: &RunConfig) -> Result<StageOutcome> {
    let out = cfg.out_dir();
    let paths = RunPaths::new(&out);
    let mut outcome = StageOutcome::new("report");
    let text = std::fs::read_to_string(paths.reports())
        .with_context(|| format!("reading {}", paths.reports().display()))?;
    let reports: Vec<CorrelationReport> = serde_json::from_str(&text)?;
    let files = make_report(&reports, &out)?;
    outcome.set("files", files.len());
    outcome.set(
        "paths",
        serde_json::to_value(
            files
                .iter()
                .map(|p| {
                    p.strip_prefix(&out)
                        .unwrap_or(p)
                        .display()
                        .to_string()
                })
                .collect::<Vec<_>>(),
        )?,
    );
    Ok(outcome)
}
