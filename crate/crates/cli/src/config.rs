//! Run configuration: one TOML file drives every stage. Flags override
//! file values; `${VAR}` references in path fields expand from the
//! environment.

use anyhow::{bail, Context, Result};
use mvq_core::dataset::{CodecKind, CodecSpec};
use mvq_core::eval::Pooling;
use mvq_core::model::{ConvStage, ModelConfig, ModelKind};
use mvq_core::train::{TargetKind, TrainConfig};
use mvq_core::types::Task;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub task: Task,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub out: String,
    /// Worker cap for intra-stage parallelism; 0 keeps the default.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default = "default_codecs")]
    pub codecs: Vec<CodecConfig>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub label: LabelConfig,
    #[serde(default)]
    pub targets: TargetsConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_schema_version() -> u32 {
    mvq_core::SCHEMA_VERSION
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum CorpusKind {
    Synthetic,
    Directory,
}

impl Default for CorpusKind {
    fn default() -> Self {
        CorpusKind::Synthetic
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default)]
    pub kind: CorpusKind,
    /// Source image directory (directory corpora). For face corpora the
    /// first path component below this directory is the person id.
    #[serde(default)]
    pub dir: Option<String>,
    /// Synthetic frame count (person count for face corpora).
    #[serde(default = "default_corpus_count")]
    pub count: usize,
    #[serde(default = "default_corpus_width")]
    pub width: u32,
    #[serde(default = "default_corpus_height")]
    pub height: u32,
    #[serde(default = "default_objects_per_frame")]
    pub objects_per_frame: usize,
    #[serde(default = "default_images_per_person")]
    pub images_per_person: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            kind: CorpusKind::Synthetic,
            dir: None,
            count: default_corpus_count(),
            width: default_corpus_width(),
            height: default_corpus_height(),
            objects_per_frame: default_objects_per_frame(),
            images_per_person: default_images_per_person(),
        }
    }
}

fn default_corpus_count() -> usize {
    20
}
fn default_corpus_width() -> u32 {
    192
}
fn default_corpus_height() -> u32 {
    128
}
fn default_objects_per_frame() -> usize {
    2
}
fn default_images_per_person() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub name: String,
    pub grid: Vec<i32>,
    #[serde(default)]
    pub encode: Option<String>,
    #[serde(default)]
    pub decode: Option<String>,
    #[serde(default)]
    pub ext: Option<String>,
    #[serde(default)]
    pub qf_range: Option<(i32, i32)>,
}

fn default_codecs() -> Vec<CodecConfig> {
    vec![CodecConfig {
        name: "jpeg".into(),
        grid: vec![10, 30, 50, 70, 90],
        encode: None,
        decode: None,
        ext: None,
        qf_range: None,
    }]
}

impl CodecConfig {
    pub fn to_spec(&self) -> Result<CodecSpec> {
        let spec = if self.name == "jpeg" && self.encode.is_none() {
            CodecSpec::jpeg(self.grid.clone())
        } else {
            let encode = self
                .encode
                .clone()
                .with_context(|| format!("codec {:?} needs an encode template", self.name))?;
            CodecSpec {
                name: self.name.clone(),
                kind: CodecKind::External {
                    encode: expand_env(&encode)?,
                    decode: match &self.decode {
                        Some(d) => Some(expand_env(d)?),
                        None => None,
                    },
                    ext: self.ext.clone().unwrap_or_else(|| "bin".into()),
                },
                grid: self.grid.clone(),
                qf_range: self.qf_range.unwrap_or((0, 100)),
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Codec whose grid is re-balanced against `calibrate_target`'s
    /// measured PSNR distribution before encoding.
    #[serde(default)]
    pub calibrate_codec: Option<String>,
    #[serde(default)]
    pub calibrate_target: Option<String>,
    #[serde(default = "default_calibrate_sample")]
    pub calibrate_sample: usize,
}

fn default_calibrate_sample() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelConfig {
    /// "synthetic" or "command".
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default = "default_confidence_threshold")]
    pub confidence_threshold: f64,
    #[serde(default = "default_min_gap")]
    pub min_gap: usize,
    #[serde(default = "default_max_plate_distance")]
    pub max_plate_distance: usize,
    #[serde(default)]
    pub detect_cmd: Option<String>,
    #[serde(default)]
    pub embed_cmd: Option<String>,
    #[serde(default)]
    pub recognize_cmd: Option<String>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Seed of the synthetic embedder's fixed projection (part of backend
    /// identity).
    #[serde(default = "default_embed_seed")]
    pub embed_seed: u64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            backend: default_backend(),
            confidence_threshold: default_confidence_threshold(),
            min_gap: default_min_gap(),
            max_plate_distance: default_max_plate_distance(),
            detect_cmd: None,
            embed_cmd: None,
            recognize_cmd: None,
            embed_dim: default_embed_dim(),
            embed_seed: default_embed_seed(),
        }
    }
}

fn default_backend() -> String {
    "synthetic".into()
}
fn default_confidence_threshold() -> f64 {
    0.7
}
fn default_min_gap() -> usize {
    1
}
fn default_max_plate_distance() -> usize {
    1
}
fn default_embed_dim() -> usize {
    64
}
fn default_embed_seed() -> u64 {
    17
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsConfig {
    #[serde(default = "default_match_threshold")]
    pub match_threshold: f64,
    #[serde(default = "default_class_aware")]
    pub class_aware: bool,
}

impl Default for TargetsConfig {
    fn default() -> Self {
        Self {
            match_threshold: default_match_threshold(),
            class_aware: default_class_aware(),
        }
    }
}

fn default_match_threshold() -> f64 {
    0.5
}
fn default_class_aware() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub target: Option<TargetKind>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Crop input resolution [width, height]; defaults depend on the
    /// model family.
    #[serde(default)]
    pub input_size: Option<[u32; 2]>,
    /// Backbone stages as [out_channels, kernel, stride] triples.
    #[serde(default)]
    pub stages: Option<Vec<[usize; 3]>>,
    #[serde(default)]
    pub head_hidden: Option<Vec<usize>>,
    #[serde(default = "default_subset_size")]
    pub subset_size: usize,
    #[serde(default = "default_split")]
    pub split: (f64, f64),
    #[serde(default = "default_crop_padding")]
    pub crop_padding: f64,
    #[serde(default)]
    pub init_weights: Option<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            target: None,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            input_size: None,
            stages: None,
            head_hidden: None,
            subset_size: default_subset_size(),
            split: default_split(),
            crop_padding: default_crop_padding(),
            init_weights: None,
        }
    }
}

fn default_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    16
}
fn default_learning_rate() -> f64 {
    0.002
}
fn default_subset_size() -> usize {
    8
}
fn default_split() -> (f64, f64) {
    (0.8, 0.2)
}
fn default_crop_padding() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_plugins")]
    pub plugins: Vec<String>,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
    /// Target the metrics are correlated against; defaults to the
    /// training target.
    #[serde(default)]
    pub target: Option<TargetKind>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            plugins: default_plugins(),
            pooling: default_pooling(),
            target: None,
        }
    }
}

fn default_plugins() -> Vec<String> {
    vec!["psnr".into(), "ssim".into()]
}
fn default_pooling() -> Pooling {
    Pooling::PerObject
}

/// Expands `${VAR}` references from the environment; unknown variables are
/// a configuration error.
pub fn expand_env(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .with_context(|| format!("unterminated ${{...}} in {s:?}"))?;
        let var = &after[..end];
        let value = std::env::var(var)
            .with_context(|| format!("environment variable {var:?} referenced by config is unset"))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))?;
        cfg.out = expand_env(&cfg.out)?;
        if let Some(dir) = cfg.corpus.dir.take() {
            cfg.corpus.dir = Some(expand_env(&dir)?);
        }
        if let Some(w) = cfg.train.init_weights.take() {
            cfg.train.init_weights = Some(expand_env(&w)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != mvq_core::SCHEMA_VERSION {
            bail!(
                "config schema version {} not supported; this build reads {}",
                self.schema_version,
                mvq_core::SCHEMA_VERSION
            );
        }
        if matches!(self.corpus.kind, CorpusKind::Directory) && self.corpus.dir.is_none() {
            bail!("corpus.kind = \"directory\" needs corpus.dir");
        }
        if self.codecs.is_empty() {
            bail!("at least one codec must be configured");
        }
        for codec in &self.codecs {
            codec.to_spec()?;
        }
        if self.label.backend == "command" {
            if self.label.detect_cmd.is_none() {
                bail!("label.backend = \"command\" needs label.detect_cmd");
            }
            if self.task == Task::Face && self.label.embed_cmd.is_none() {
                bail!("face task with command backend needs label.embed_cmd");
            }
            if self.task == Task::Plate && self.label.recognize_cmd.is_none() {
                bail!("plate task with command backend needs label.recognize_cmd");
            }
        } else if self.label.backend != "synthetic" {
            bail!("unknown label.backend {:?}", self.label.backend);
        }
        let (ft, fv) = self.train.split;
        if !(0.0..=1.0).contains(&ft) || !(0.0..=1.0).contains(&fv) || ft + fv > 1.0 + 1e-12 {
            bail!("train.split fractions ({ft}, {fv}) must be non-negative and sum to at most 1");
        }
        self.train_config()?;
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn train_target(&self) -> TargetKind {
        self.train.target.unwrap_or(match self.task {
            Task::Object => TargetKind::DeltaObjectIou,
            Task::Face => TargetKind::FaceDelta,
            Task::Plate => TargetKind::Jaro,
        })
    }

    pub fn eval_target(&self) -> TargetKind {
        self.eval.target.unwrap_or_else(|| self.train_target())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let target = self.train_target();
        let mut model = match target.model_kind() {
            ModelKind::Detection => ModelConfig::detection_default(self.task),
            ModelKind::Face => ModelConfig::face_default(),
            ModelKind::Plate => ModelConfig::plate_default(),
        };
        model.task = self.task;
        if let Some([w, h]) = self.train.input_size {
            model.input_width = w;
            model.input_height = h;
        }
        if let Some(stages) = &self.train.stages {
            model.stages = stages
                .iter()
                .map(|[c, k, s]| ConvStage {
                    out_channels: *c,
                    kernel: *k,
                    stride: *s,
                })
                .collect();
        }
        if let Some(hidden) = &self.train.head_hidden {
            model.head_hidden = hidden.clone();
        }
        if model.kind == ModelKind::Face {
            model.subset_size = self.train.subset_size;
        }
        model.validate()?;
        Ok(model)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            task: self.task,
            target: self.train_target(),
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.seed,
            model: self.model_config()?,
            crop_padding: self.train.crop_padding,
            init_weights: self.train.init_weights.as_ref().map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
task = "object"
out = "runs/demo"
"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.codecs.len(), 1);
        assert_eq!(cfg.codecs[0].grid, vec![10, 30, 50, 70, 90]);
        assert_eq!(cfg.train_target(), TargetKind::DeltaObjectIou);
    }

    #[test]
    fn env_expansion() {
        std::env::set_var("MVQ_TEST_DIR", "/tmp/mvq");
        assert_eq!(expand_env("${MVQ_TEST_DIR}/out").unwrap(), "/tmp/mvq/out");
        assert!(expand_env("${MVQ_TEST_UNSET_VAR}/x").is_err());
    }

    #[test]
    fn bad_split_rejected() {
        let cfg: RunConfig = toml::from_str(
            r#"
task = "object"
out = "o"
[train]
split = [1.0, 0.1]
"#,
        )
        .unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn incompatible_target_rejected() {
        let cfg: RunConfig = toml::from_str(
            r#"
task = "object"
out = "o"
[train]
target = "jaro"
"#,
        )
        .unwrap();
        assert!(cfg.validate().is_err());
    }
}
