//! Training: source-frame splits, target-score computation against the
//! vision backends, and the seeded MSE training loop with per-epoch
//! checkpoints.

use crate::backends::{DetectorBackend, FaceEmbedder, PlateRecognizer};
use crate::dataset::{crop_rect, extract_crops, Manifest, Split};
use crate::error::{Error, Result};
use crate::matching::{delta_object_iou, mean_iou, object_iou, MatchOptions};
use crate::model::{
    CropSample, DetectionQualityModel, FaceQualityModel, ModelConfig, ModelKind, PairSample,
    PlateQualityModel, SubsetSample,
};
use crate::nn::Adam;
use crate::recognition::{face_delta, jaro_similarity, plate_frame_score};
use crate::types::{ImageRef, PlateString, Task};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

/// Which ground-truth degradation score a model is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    MeanIou,
    ObjectIou,
    DeltaObjectIou,
    FaceDelta,
    Jaro,
}

impl TargetKind {
    pub fn name(self) -> &'static str {
        match self {
            TargetKind::MeanIou => "mean_iou",
            TargetKind::ObjectIou => "object_iou",
            TargetKind::DeltaObjectIou => "delta_object_iou",
            TargetKind::FaceDelta => "face_delta",
            TargetKind::Jaro => "jaro",
        }
    }

    /// Detection targets exist for every task; the recognition targets are
    /// task-specific.
    pub fn compatible_with(self, task: Task) -> bool {
        match self {
            TargetKind::FaceDelta => task == Task::Face,
            TargetKind::Jaro => task == Task::Plate,
            _ => true,
        }
    }

    /// Orientation of the target: degradation deltas are higher-is-worse,
    /// similarity and IoU scores higher-is-better.
    pub fn higher_is_better(self) -> bool {
        match self {
            TargetKind::MeanIou | TargetKind::ObjectIou | TargetKind::Jaro => true,
            TargetKind::DeltaObjectIou | TargetKind::FaceDelta => false,
        }
    }

    pub fn model_kind(self) -> ModelKind {
        match self {
            TargetKind::FaceDelta => ModelKind::Face,
            TargetKind::Jaro => ModelKind::Plate,
            _ => ModelKind::Detection,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub target: TargetKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub model: ModelConfig,
    /// Box padding applied when extracting training crops.
    pub crop_padding: f64,
    /// Optional container to initialize weights from (must match the
    /// architecture).
    pub init_weights: Option<PathBuf>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.target.compatible_with(self.task) {
            return Err(Error::TargetTaskMismatch {
                task: self.task,
                target: self.target.name().to_string(),
            });
        }
        if self.model.kind != self.target.model_kind() {
            return Err(Error::InvalidConfig(format!(
                "target {} needs a {} model, config has {}",
                self.target.name(),
                self.target.model_kind().as_str(),
                self.model.kind.as_str()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        self.model.validate()
    }
}

// ---------------------------------------------------------------------------
// splits

/// Splits by source frame, so all compressed variants of one source share
/// a split. Sizes are `round(fraction * n)`; any remainder becomes the
/// held-out test split.
pub fn make_splits(mut manifest: Manifest, fractions: (f64, f64), seed: u64) -> Result<Manifest> {
    let (f_train, f_val) = fractions;
    if f_train < 0.0 || f_val < 0.0 || f_train + f_val > 1.0 + 1e-12 {
        return Err(Error::InvalidSplitFractions {
            train: f_train,
            val: f_val,
        });
    }
    let n = manifest.frames.len();
    let n_train = (f_train * n as f64).round() as usize;
    let n_val = ((f_val * n as f64).round() as usize).min(n - n_train.min(n));
    if (f_train > 0.0 && n_train == 0) || (f_val > 0.0 && n_val == 0) {
        return Err(Error::CorpusTooSmall {
            frames: n,
            train: f_train,
            val: f_val,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    for (pos, idx) in order.into_iter().enumerate() {
        manifest.frames[idx].split = Some(if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// target records

/// One row of the JSON-Lines target-score file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetRecord {
    pub frame_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<String>,
    pub codec: String,
    pub qf: i32,
    pub target_name: String,
    pub value: f64,
}

pub fn write_target_records(path: &Path, records: &[TargetRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::ManifestFormat {
            line: 0,
            message: e.to_string(),
        })?;
        buf.push(b'\n');
    }
    crate::dataset::atomic_write(path, &buf)
}

pub fn read_target_records(path: &Path) -> Result<Vec<TargetRecord>> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::ManifestFormat {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// target computation

/// The machine-vision backends a target computation runs against.
pub struct Backends<'a> {
    pub detector: Option<&'a dyn DetectorBackend>,
    pub embedder: Option<&'a dyn FaceEmbedder>,
    pub recognizer: Option<&'a dyn PlateRecognizer>,
}

#[derive(Debug, Clone)]
pub struct TargetOptions {
    pub match_options: MatchOptions<f64>,
}

impl Default for TargetOptions {
    fn default() -> Self {
        Self {
            match_options: MatchOptions::default(),
        }
    }
}

#[derive(Debug, Default)]
pub struct TargetComputation {
    pub records: Vec<TargetRecord>,
    /// Records skipped because a backend failed; one message per failure.
    pub failures: Vec<String>,
}

/// Computes every applicable target for each (object | pair | plate) x
/// variant. The reference side of each frame is processed by the backend
/// exactly once and reused across variants.
pub fn compute_targets(
    manifest: &Manifest,
    base_dir: &Path,
    backends: &Backends<'_>,
    opts: &TargetOptions,
) -> Result<TargetComputation> {
    let mut out = TargetComputation::default();
    for record in &manifest.frames {
        let frame = manifest.resolve_frame(record, base_dir)?;
        let frame_id = &record.source_id;

        if let Some(detector) = backends.detector {
            // reference detections computed once per source frame
            match detector.detect(&frame.source) {
                Ok(ref_dets) => {
                    for variant in &frame.variants {
                        let var_dets = match detector.detect(&variant.image) {
                            Ok(d) => d,
                            Err(e) => {
                                out.failures
                                    .push(format!("{frame_id} {}@{}: {e}", variant.codec, variant.qf));
                                continue;
                            }
                        };
                        for (i, gt_obj) in frame.gt.iter().enumerate() {
                            let ref_iou = object_iou(gt_obj, &ref_dets, opts.match_options);
                            let compr_iou = object_iou(gt_obj, &var_dets, opts.match_options);
                            out.records.push(TargetRecord {
                                frame_id: frame_id.clone(),
                                object_id: Some(i.to_string()),
                                codec: variant.codec.clone(),
                                qf: variant.qf,
                                target_name: TargetKind::ObjectIou.name().into(),
                                value: compr_iou,
                            });
                            out.records.push(TargetRecord {
                                frame_id: frame_id.clone(),
                                object_id: Some(i.to_string()),
                                codec: variant.codec.clone(),
                                qf: variant.qf,
                                target_name: TargetKind::DeltaObjectIou.name().into(),
                                value: delta_object_iou(ref_iou, compr_iou),
                            });
                        }
                        if let Some(value) = mean_iou(&frame.gt, &var_dets, opts.match_options) {
                            out.records.push(TargetRecord {
                                frame_id: frame_id.clone(),
                                object_id: None,
                                codec: variant.codec.clone(),
                                qf: variant.qf,
                                target_name: TargetKind::MeanIou.name().into(),
                                value,
                            });
                        }
                    }
                }
                Err(e) => out.failures.push(format!("{frame_id} reference: {e}")),
            }
        }

        if record.task == Task::Face {
            if let Some(embedder) = backends.embedder {
                match face_targets_for_frame(record, &frame, base_dir, embedder) {
                    Ok(records) => out.records.extend(records),
                    Err(e) => out.failures.push(format!("{frame_id} face: {e}")),
                }
            }
        }

        if record.task == Task::Plate {
            if let Some(recognizer) = backends.recognizer {
                match plate_targets_for_frame(record, &frame, recognizer) {
                    Ok(records) => out.records.extend(records),
                    Err(e) => out.failures.push(format!("{frame_id} plate: {e}")),
                }
            }
        }
    }
    Ok(out)
}

fn face_targets_for_frame(
    record: &crate::dataset::FrameRecord,
    frame: &crate::dataset::LabeledFrame,
    base_dir: &Path,
    embedder: &dyn FaceEmbedder,
) -> Result<Vec<TargetRecord>> {
    let person = record
        .gt
        .person
        .clone()
        .ok_or(Error::EmptyInput("face frame without person id"))?;
    let db_path = record
        .gt
        .database_path
        .as_ref()
        .ok_or(Error::EmptyInput("face frame without database image"))?;
    let db_box = record
        .gt
        .database_box
        .as_ref()
        .ok_or(Error::EmptyInput("face frame without database box"))?;
    let query_box = frame
        .gt
        .first()
        .ok_or(Error::EmptyInput("face frame without query box"))?;

    let resolved = if Path::new(db_path).is_absolute() {
        PathBuf::from(db_path)
    } else {
        base_dir.join(db_path)
    };
    let db_image = ImageRef::open(&resolved)?;
    let db_raster = db_image.load()?;
    let (x0, y0, x1, y1) = crop_rect(&db_box.bbox, 0.0, db_image.width, db_image.height);
    let db_crop = ImageRef::from_raster(db_raster.crop(x0, y0, x1, y1));

    let source = frame.source.load()?;
    let (qx0, qy0, qx1, qy1) = crop_rect(&query_box.bbox, 0.0, frame.source.width, frame.source.height);
    let ref_crop = ImageRef::from_raster(source.crop(qx0, qy0, qx1, qy1));

    let mut records = Vec::new();
    for variant in &frame.variants {
        let var_raster = variant.image.load()?;
        let var_crop = ImageRef::from_raster(var_raster.crop(qx0, qy0, qx1, qy1));
        let value = face_delta(&ref_crop, &var_crop, &db_crop, embedder)?;
        records.push(TargetRecord {
            frame_id: record.source_id.clone(),
            object_id: Some(person.clone()),
            codec: variant.codec.clone(),
            qf: variant.qf,
            target_name: TargetKind::FaceDelta.name().into(),
            value,
        });
    }
    Ok(records)
}

fn plate_targets_for_frame(
    record: &crate::dataset::FrameRecord,
    frame: &crate::dataset::LabeledFrame,
    recognizer: &dyn PlateRecognizer,
) -> Result<Vec<TargetRecord>> {
    if frame.plate_strings.len() != frame.gt.len() {
        return Err(Error::EmptyInput("plate frame without GT strings"));
    }
    let mut records = Vec::new();
    for variant in &frame.variants {
        let var_raster = variant.image.load()?;
        let mut matched: Vec<(PlateString, PlateString)> = Vec::new();
        for (i, (det, gt_string)) in frame.gt.iter().zip(&frame.plate_strings).enumerate() {
            let (x0, y0, x1, y1) = crop_rect(&det.bbox, 0.0, frame.source.width, frame.source.height);
            let crop = ImageRef::from_raster(var_raster.crop(x0, y0, x1, y1));
            let read = recognizer.recognize(&crop)?;
            records.push(TargetRecord {
                frame_id: record.source_id.clone(),
                object_id: Some(i.to_string()),
                codec: variant.codec.clone(),
                qf: variant.qf,
                target_name: TargetKind::Jaro.name().into(),
                value: jaro_similarity(gt_string, &read),
            });
            matched.push((gt_string.clone(), read));
        }
        if let Some(frame_score) = plate_frame_score(&matched) {
            records.push(TargetRecord {
                frame_id: record.source_id.clone(),
                object_id: None,
                codec: variant.codec.clone(),
                qf: variant.qf,
                target_name: "jaro_frame".into(),
                value: frame_score,
            });
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// training loop

/// Per-epoch training state snapshot; `model` holds the serialized
/// container at the end of the epoch.
#[derive(Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_srcc: Option<f64>,
    pub model: Vec<u8>,
}

/// A trained predictor, dispatched by architecture family.
#[derive(Clone)]
pub enum TrainedModel {
    Detection(DetectionQualityModel<f32>),
    Face(FaceQualityModel<f32>),
    Plate(PlateQualityModel<f32>),
}

impl TrainedModel {
    pub fn kind_str(&self) -> &'static str {
        match self {
            TrainedModel::Detection(_) => "detection",
            TrainedModel::Face(_) => "face",
            TrainedModel::Plate(_) => "plate",
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            TrainedModel::Detection(m) => m.save(path),
            TrainedModel::Face(m) => m.save(path),
            TrainedModel::Plate(m) => m.save(path),
        }
    }

    pub fn load(kind: ModelKind, path: &Path) -> Result<Self> {
        Ok(match kind {
            ModelKind::Detection => TrainedModel::Detection(DetectionQualityModel::load(path)?),
            ModelKind::Face => TrainedModel::Face(FaceQualityModel::load(path)?),
            ModelKind::Plate => TrainedModel::Plate(PlateQualityModel::load(path)?),
        })
    }
}

pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub model: TrainedModel,
    /// Index into `checkpoints` of the epoch with the best validation
    /// SRCC (falls back to the last checkpoint without validation data).
    pub best_epoch: usize,
    /// CSV log, one row per checkpoint: epoch,train_loss,val_loss,val_srcc
    pub log_csv: String,
}

trait Trainable: Sized {
    type Sample;
    fn loss_and_grads(&mut self, batch: &[Self::Sample]) -> f32;
    fn full_loss(&self, samples: &[Self::Sample]) -> f32;
    fn step(&mut self, opt: &mut Adam<f32>);
    fn predict_sample(&self, sample: &Self::Sample) -> f64;
    fn sample_target(sample: &Self::Sample) -> f64;
    fn serialize(&self) -> Result<Vec<u8>>;
    fn into_trained(self) -> TrainedModel;
}

impl Trainable for DetectionQualityModel<f32> {
    type Sample = PairSample<f32>;
    fn loss_and_grads(&mut self, batch: &[Self::Sample]) -> f32 {
        DetectionQualityModel::loss_and_grads(self, batch)
    }
    fn full_loss(&self, samples: &[Self::Sample]) -> f32 {
        self.loss(samples)
    }
    fn step(&mut self, opt: &mut Adam<f32>) {
        self.adam_step(opt);
    }
    fn predict_sample(&self, sample: &Self::Sample) -> f64 {
        self.predict_tensors(&sample.reference, &sample.compressed) as f64
    }
    fn sample_target(sample: &Self::Sample) -> f64 {
        sample.target as f64
    }
    fn serialize(&self) -> Result<Vec<u8>> {
        self.to_bytes()
    }
    fn into_trained(self) -> TrainedModel {
        TrainedModel::Detection(self)
    }
}

impl Trainable for FaceQualityModel<f32> {
    type Sample = SubsetSample<f32>;
    fn loss_and_grads(&mut self, batch: &[Self::Sample]) -> f32 {
        FaceQualityModel::loss_and_grads(self, batch)
    }
    fn full_loss(&self, samples: &[Self::Sample]) -> f32 {
        self.loss(samples)
    }
    fn step(&mut self, opt: &mut Adam<f32>) {
        self.adam_step(opt);
    }
    fn predict_sample(&self, sample: &Self::Sample) -> f64 {
        self.predict_subset_tensors(&sample.pairs) as f64
    }
    fn sample_target(sample: &Self::Sample) -> f64 {
        sample.target as f64
    }
    fn serialize(&self) -> Result<Vec<u8>> {
        self.to_bytes()
    }
    fn into_trained(self) -> TrainedModel {
        TrainedModel::Face(self)
    }
}

impl Trainable for PlateQualityModel<f32> {
    type Sample = CropSample<f32>;
    fn loss_and_grads(&mut self, batch: &[Self::Sample]) -> f32 {
        PlateQualityModel::loss_and_grads(self, batch)
    }
    fn full_loss(&self, samples: &[Self::Sample]) -> f32 {
        self.loss(samples)
    }
    fn step(&mut self, opt: &mut Adam<f32>) {
        self.adam_step(opt);
    }
    fn predict_sample(&self, sample: &Self::Sample) -> f64 {
        self.predict_tensor(&sample.crop) as f64
    }
    fn sample_target(sample: &Self::Sample) -> f64 {
        sample.target as f64
    }
    fn serialize(&self) -> Result<Vec<u8>> {
        self.to_bytes()
    }
    fn into_trained(self) -> TrainedModel {
        TrainedModel::Plate(self)
    }
}

fn run_training<M: Trainable>(
    mut model: M,
    mut train: Vec<M::Sample>,
    val: Vec<M::Sample>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training samples"));
    }
    let mut opt = Adam::<f32>::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checkpoints: Vec<Checkpoint> = Vec::with_capacity(cfg.epochs + 1);

    let eval_model = |model: &M| -> (Option<f64>, Option<f64>) {
        if val.is_empty() {
            return (None, None);
        }
        let loss = model.full_loss(&val) as f64;
        let preds: Vec<f64> = val.iter().map(|s| model.predict_sample(s)).collect();
        let targets: Vec<f64> = val.iter().map(|s| M::sample_target(s)).collect();
        (Some(loss), crate::eval::srcc(&preds, &targets).ok())
    };

    // epoch 0: initialization state, no updates
    let init_loss = model.full_loss(&train) as f64;
    let (val_loss, val_srcc) = eval_model(&model);
    checkpoints.push(Checkpoint {
        epoch: 0,
        train_loss: init_loss,
        val_loss,
        val_srcc,
        model: model.serialize()?,
    });

    for epoch in 1..=cfg.epochs {
        train.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for batch in train.chunks(cfg.batch_size) {
            let loss = model.loss_and_grads(batch);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            model.step(&mut opt);
            epoch_loss += loss as f64;
            batches += 1;
        }
        let train_loss = epoch_loss / batches.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        let (val_loss, val_srcc) = eval_model(&model);
        checkpoints.push(Checkpoint {
            epoch,
            train_loss,
            val_loss,
            val_srcc,
            model: model.serialize()?,
        });
    }

    let best_epoch = checkpoints
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.val_srcc.map(|s| (i, s)))
        .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite srcc"))
        .map(|(i, _)| i)
        .unwrap_or(checkpoints.len() - 1);

    let mut log_csv = String::from("epoch,train_loss,val_loss,val_srcc\n");
    for c in &checkpoints {
        log_csv.push_str(&format!(
            "{},{:.8},{},{}\n",
            c.epoch,
            c.train_loss,
            c.val_loss.map(|v| format!("{v:.8}")).unwrap_or_default(),
            c.val_srcc.map(|v| format!("{v:.6}")).unwrap_or_default(),
        ));
    }

    Ok(TrainOutcome {
        checkpoints,
        model: model.into_trained(),
        best_epoch,
        log_csv,
    })
}

// ---------------------------------------------------------------------------
// sample assembly

fn target_lookup<'a>(
    targets: &'a [TargetRecord],
    name: &str,
) -> BTreeMap<(&'a str, Option<&'a str>, &'a str, i32), f64> {
    targets
        .iter()
        .filter(|r| r.target_name == name)
        .map(|r| {
            (
                (
                    r.frame_id.as_str(),
                    r.object_id.as_deref(),
                    r.codec.as_str(),
                    r.qf,
                ),
                r.value,
            )
        })
        .collect()
}

fn split_of(record: &crate::dataset::FrameRecord) -> Split {
    record.split.unwrap_or(Split::Train)
}

/// Trains the model selected by the config against the given manifest and
/// precomputed targets. Fully seeded: the same inputs produce the same
/// checkpoints.
pub fn train_model(
    cfg: &TrainConfig,
    manifest: &Manifest,
    base_dir: &Path,
    targets: &[TargetRecord],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.target.model_kind() {
        ModelKind::Detection => {
            let mut model = DetectionQualityModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
            if let Some(path) = &cfg.init_weights {
                model = DetectionQualityModel::load_expecting(path, &cfg.model)?;
            }
            let (train, val) = build_detection_samples(&model, manifest, base_dir, targets, cfg)?;
            run_training(model, train, val, cfg)
        }
        ModelKind::Face => {
            let mut model = FaceQualityModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
            if let Some(path) = &cfg.init_weights {
                model = FaceQualityModel::load_expecting(path, &cfg.model)?;
            }
            let (train, val) = build_face_samples(&model, manifest, base_dir, targets, cfg)?;
            run_training(model, train, val, cfg)
        }
        ModelKind::Plate => {
            let mut model = PlateQualityModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
            if let Some(path) = &cfg.init_weights {
                model = PlateQualityModel::load_expecting(path, &cfg.model)?;
            }
            let (train, val) = build_plate_samples(&model, manifest, base_dir, targets, cfg)?;
            run_training(model, train, val, cfg)
        }
    }
}

fn build_detection_samples(
    model: &DetectionQualityModel<f32>,
    manifest: &Manifest,
    base_dir: &Path,
    targets: &[TargetRecord],
    cfg: &TrainConfig,
) -> Result<(Vec<PairSample<f32>>, Vec<PairSample<f32>>)> {
    let lookup = target_lookup(targets, cfg.target.name());
    let mut train = Vec::new();
    let mut val = Vec::new();
    for record in &manifest.frames {
        let split = split_of(record);
        if split == Split::Test {
            continue;
        }
        let frame = manifest.resolve_frame(record, base_dir)?;
        let bucket: &mut Vec<PairSample<f32>> = if split == Split::Train {
            &mut train
        } else {
            &mut val
        };
        if cfg.target == TargetKind::MeanIou {
            let ref_tensor = model.input_tensor(&frame.source.load()?)?;
            for variant in &frame.variants {
                let key = (
                    record.source_id.as_str(),
                    None,
                    variant.codec.as_str(),
                    variant.qf,
                );
                if let Some(value) = lookup.get(&key) {
                    bucket.push(PairSample {
                        reference: ref_tensor.clone(),
                        compressed: model.input_tensor(&variant.image.load()?)?,
                        target: *value as f32,
                    });
                }
            }
            continue;
        }
        let crops = extract_crops(&frame, cfg.crop_padding)?;
        for object in &crops {
            let ref_tensor = model.input_tensor(&object.ref_crop)?;
            for vc in &object.variant_crops {
                let key = (
                    record.source_id.as_str(),
                    Some(object.object_id.as_str()),
                    vc.codec.as_str(),
                    vc.qf,
                );
                if let Some(value) = lookup.get(&key) {
                    bucket.push(PairSample {
                        reference: ref_tensor.clone(),
                        compressed: model.input_tensor(&vc.crop)?,
                        target: *value as f32,
                    });
                }
            }
        }
    }
    Ok((train, val))
}

fn build_face_samples(
    model: &FaceQualityModel<f32>,
    manifest: &Manifest,
    base_dir: &Path,
    targets: &[TargetRecord],
    cfg: &TrainConfig,
) -> Result<(Vec<SubsetSample<f32>>, Vec<SubsetSample<f32>>)> {
    let lookup = target_lookup(targets, cfg.target.name());
    // (split, codec, qf) -> members; manifest order keeps this deterministic
    let mut groups: BTreeMap<(u8, String, i32), Vec<(crate::nn::Tensor<f32>, f64)>> =
        BTreeMap::new();
    for record in &manifest.frames {
        let split = split_of(record);
        if split == Split::Test {
            continue;
        }
        let person = record.gt.person.clone();
        let frame = manifest.resolve_frame(record, base_dir)?;
        let crops = extract_crops(&frame, cfg.crop_padding)?;
        let Some(object) = crops.first() else { continue };
        for vc in &object.variant_crops {
            let key = (
                record.source_id.as_str(),
                person.as_deref(),
                vc.codec.as_str(),
                vc.qf,
            );
            if let Some(value) = lookup.get(&key) {
                let split_tag = if split == Split::Train { 0u8 } else { 1u8 };
                groups
                    .entry((split_tag, vc.codec.clone(), vc.qf))
                    .or_default()
                    .push((model.pair_tensor(&object.ref_crop, &vc.crop)?, *value));
            }
        }
    }
    let subset = model.config.subset_size.max(1);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for ((split_tag, _, _), members) in groups {
        for chunk in members.chunks(subset) {
            let target =
                (chunk.iter().map(|(_, v)| *v).sum::<f64>() / chunk.len() as f64) as f32;
            let sample = SubsetSample {
                pairs: chunk.iter().map(|(t, _)| t.clone()).collect(),
                target,
            };
            if split_tag == 0 {
                train.push(sample);
            } else {
                val.push(sample);
            }
        }
    }
    Ok((train, val))
}

fn build_plate_samples(
    model: &PlateQualityModel<f32>,
    manifest: &Manifest,
    base_dir: &Path,
    targets: &[TargetRecord],
    cfg: &TrainConfig,
) -> Result<(Vec<CropSample<f32>>, Vec<CropSample<f32>>)> {
    let lookup = target_lookup(targets, cfg.target.name());
    let mut train = Vec::new();
    let mut val = Vec::new();
    for record in &manifest.frames {
        let split = split_of(record);
        if split == Split::Test {
            continue;
        }
        let frame = manifest.resolve_frame(record, base_dir)?;
        let crops = extract_crops(&frame, cfg.crop_padding)?;
        let bucket: &mut Vec<CropSample<f32>> = if split == Split::Train {
            &mut train
        } else {
            &mut val
        };
        for object in &crops {
            for vc in &object.variant_crops {
                let key = (
                    record.source_id.as_str(),
                    Some(object.object_id.as_str()),
                    vc.codec.as_str(),
                    vc.qf,
                );
                if let Some(value) = lookup.get(&key) {
                    bucket.push(CropSample {
                        crop: model.input_tensor(&vc.crop),
                        target: *value as f32,
                    });
                }
            }
        }
    }
    Ok((train, val))
}
