//! The three trainable crop-level quality predictors and their
//! self-describing container format.
//!
//! All three share a conv backbone with global average pooling. The
//! detection model runs the backbone over the reference and compressed
//! crops and feeds the concatenated features plus their difference to an
//! MLP head (unbounded output: degradation deltas may be negative). The
//! face model stacks a crop pair into one 6-channel input and averages
//! features over a subset before a one-layer regression head. The plate
//! model reads a single grayscale crop and squashes its output to [0, 1].
//!
//! Final regression layers are zero-initialized so untrained predictions
//! are the neutral value. Crops are resized with the raster module's
//! triangle filter and normalized to [0, 1]; that preprocessing is part of
//! model identity.

use crate::error::{Error, Result};
use crate::nn::{seeded_rng, sigmoid, Adam, Conv2d, ConvBackbone, Linear, Mlp, Tensor};
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::types::Task;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Detection,
    Face,
    Plate,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Detection => "detection",
            ModelKind::Face => "face",
            ModelKind::Plate => "plate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Architecture description stored verbatim in the model container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub task: Task,
    pub input_width: u32,
    pub input_height: u32,
    pub stages: Vec<ConvStage>,
    /// Hidden layer widths of the MLP head (detection only; the face and
    /// plate heads are a single linear layer).
    pub head_hidden: Vec<usize>,
    /// Feature-averaging subset size (face only).
    pub subset_size: usize,
}

impl ModelConfig {
    pub fn detection_default(task: Task) -> Self {
        Self {
            kind: ModelKind::Detection,
            task,
            input_width: 224,
            input_height: 224,
            stages: vec![
                ConvStage { out_channels: 16, kernel: 3, stride: 2 },
                ConvStage { out_channels: 32, kernel: 3, stride: 2 },
                ConvStage { out_channels: 64, kernel: 3, stride: 2 },
            ],
            head_hidden: vec![64],
            subset_size: 1,
        }
    }

    pub fn face_default() -> Self {
        Self {
            kind: ModelKind::Face,
            task: Task::Face,
            input_width: 112,
            input_height: 112,
            stages: vec![
                ConvStage { out_channels: 16, kernel: 3, stride: 2 },
                ConvStage { out_channels: 32, kernel: 3, stride: 2 },
                ConvStage { out_channels: 64, kernel: 3, stride: 2 },
            ],
            head_hidden: Vec::new(),
            subset_size: 8,
        }
    }

    pub fn plate_default() -> Self {
        Self {
            kind: ModelKind::Plate,
            task: Task::Plate,
            input_width: 94,
            input_height: 24,
            stages: vec![
                ConvStage { out_channels: 16, kernel: 3, stride: 2 },
                ConvStage { out_channels: 32, kernel: 3, stride: 2 },
            ],
            head_hidden: Vec::new(),
            subset_size: 1,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self.kind {
            ModelKind::Detection => 3,
            ModelKind::Face => 6,
            ModelKind::Plate => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one conv stage".into()));
        }
        if self.input_width == 0 || self.input_height == 0 {
            return Err(Error::InvalidConfig("model input resolution must be positive".into()));
        }
        if self.kind == ModelKind::Face && self.subset_size == 0 {
            return Err(Error::InvalidConfig("face subset size must be at least 1".into()));
        }
        if self.kind != ModelKind::Detection && !self.head_hidden.is_empty() {
            return Err(Error::InvalidConfig(
                "face and plate models use a one-layer regression head".into(),
            ));
        }
        // spatial dims must survive the stage strides
        let (mut h, mut w) = (self.input_height as usize, self.input_width as usize);
        for (i, s) in self.stages.iter().enumerate() {
            if s.kernel == 0 || s.stride == 0 {
                return Err(Error::InvalidConfig(format!("stage {i} has zero kernel/stride")));
            }
            let pad = s.kernel / 2;
            if h + 2 * pad < s.kernel || w + 2 * pad < s.kernel {
                return Err(Error::InvalidConfig(format!("stage {i} collapses spatial dims")));
            }
            h = (h + 2 * pad - s.kernel) / s.stride + 1;
            w = (w + 2 * pad - s.kernel) / s.stride + 1;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// shared core

#[derive(Debug, Clone)]
struct Core<T: Scalar> {
    backbone: ConvBackbone<T>,
    head: Mlp<T>,
}

impl<T: Scalar> Core<T> {
    fn build(config: &ModelConfig, head_in: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut convs = Vec::with_capacity(config.stages.len());
        let mut in_c = config.in_channels();
        for s in &config.stages {
            convs.push(Conv2d::new(in_c, s.out_channels, s.kernel, s.stride, s.kernel / 2, &mut rng));
            in_c = s.out_channels;
        }
        let mut layers = Vec::new();
        let mut dim = head_in;
        for &hidden in &config.head_hidden {
            layers.push(Linear::new(dim, hidden, &mut rng));
            dim = hidden;
        }
        layers.push(Linear::zeroed(dim, 1));
        Self {
            backbone: ConvBackbone { convs },
            head: Mlp { layers },
        }
    }

    fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    fn zero_grads(&mut self) {
        self.backbone.zero_grads();
        self.head.zero_grads();
    }

    fn param_groups_mut(&mut self) -> Vec<&mut [T]> {
        let mut groups: Vec<&mut [T]> = Vec::new();
        for conv in &mut self.backbone.convs {
            groups.push(conv.weight.as_mut_slice());
            groups.push(conv.bias.as_mut_slice());
        }
        for layer in &mut self.head.layers {
            groups.push(layer.weight.as_mut_slice());
            groups.push(layer.bias.as_mut_slice());
        }
        groups
    }

    fn grad_groups(&self) -> Vec<&[T]> {
        let mut groups: Vec<&[T]> = Vec::new();
        for conv in &self.backbone.convs {
            groups.push(&conv.grad_weight);
            groups.push(&conv.grad_bias);
        }
        for layer in &self.head.layers {
            groups.push(&layer.grad_weight);
            groups.push(&layer.grad_bias);
        }
        groups
    }

    fn head_param_groups_mut(&mut self) -> Vec<&mut [T]> {
        self.head
            .layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    fn head_grad_groups(&self) -> Vec<&[T]> {
        self.head
            .layers
            .iter()
            .flat_map(|l| [l.grad_weight.as_slice(), l.grad_bias.as_slice()])
            .collect()
    }

    fn randomize_head(&mut self, seed: u64) {
        let mut rng = seeded_rng(seed);
        for layer in &mut self.head.layers {
            let fresh = Linear::new(layer.in_dim, layer.out_dim, &mut rng);
            layer.weight = fresh.weight;
            // nonzero biases make the finite-difference check exercise them
            layer.bias = (0..layer.out_dim)
                .map(|i| T::from_f64(0.01 * (i as f64 + 1.0)))
                .collect();
        }
    }

    fn named_params(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::new();
        for (i, conv) in self.backbone.convs.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), conv.weight.as_slice()));
            out.push((format!("backbone.{i}.bias"), conv.bias.as_slice()));
        }
        for (i, layer) in self.head.layers.iter().enumerate() {
            out.push((format!("head.{i}.weight"), layer.weight.as_slice()));
            out.push((format!("head.{i}.bias"), layer.bias.as_slice()));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out: Vec<(String, &mut Vec<T>)> = Vec::new();
        for (i, conv) in self.backbone.convs.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.weight"), &mut conv.weight));
            out.push((format!("backbone.{i}.bias"), &mut conv.bias));
        }
        for (i, layer) in self.head.layers.iter_mut().enumerate() {
            out.push((format!("head.{i}.weight"), &mut layer.weight));
            out.push((format!("head.{i}.bias"), &mut layer.bias));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// container format

#[derive(Serialize, Deserialize)]
struct Container {
    schema_version: u32,
    scalar: String,
    config: ModelConfig,
    /// Parameter name -> base64 of little-endian scalar bytes; BTreeMap
    /// keeps serialization deterministic.
    weights: BTreeMap<String, String>,
}

fn encode_weights<T: Scalar>(params: &[(String, &[T])]) -> BTreeMap<String, String> {
    params
        .iter()
        .map(|(name, values)| {
            let mut bytes = Vec::with_capacity(values.len() * T::BYTE_WIDTH);
            for v in *values {
                v.write_le_bytes(&mut bytes);
            }
            (name.clone(), base64::engine::general_purpose::STANDARD.encode(bytes))
        })
        .collect()
}

fn container_bytes<T: Scalar>(config: &ModelConfig, core: &Core<T>) -> Result<Vec<u8>> {
    let container = Container {
        schema_version: crate::SCHEMA_VERSION,
        scalar: T::TYPE_NAME.to_string(),
        config: config.clone(),
        weights: encode_weights(&core.named_params()),
    };
    serde_json::to_vec_pretty(&container).map_err(|e| Error::ModelFormat(e.to_string()))
}

fn save_container<T: Scalar>(path: &Path, config: &ModelConfig, core: &Core<T>) -> Result<()> {
    crate::dataset::atomic_write(path, &container_bytes(config, core)?)
}

fn load_container<T: Scalar>(path: &Path, expected_kind: ModelKind) -> Result<(ModelConfig, Core<T>)> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    load_container_slice(&bytes, expected_kind)
}

fn load_container_slice<T: Scalar>(
    bytes: &[u8],
    expected_kind: ModelKind,
) -> Result<(ModelConfig, Core<T>)> {
    let container: Container =
        serde_json::from_slice(bytes).map_err(|e| Error::ModelFormat(e.to_string()))?;
    if container.schema_version != crate::SCHEMA_VERSION {
        return Err(Error::ModelSchemaMismatch {
            expected: crate::SCHEMA_VERSION,
            found: container.schema_version,
        });
    }
    if container.scalar != T::TYPE_NAME {
        return Err(Error::ModelScalarMismatch {
            expected: T::TYPE_NAME,
            found: container.scalar,
        });
    }
    if container.config.kind != expected_kind {
        return Err(Error::ModelKindMismatch {
            expected: expected_kind.as_str(),
            found: container.config.kind.as_str().to_string(),
        });
    }
    container.config.validate()?;
    let head_in = head_input_dim(&container.config);
    let mut core = Core::<T>::build(&container.config, head_in, 0);
    let engine = &base64::engine::general_purpose::STANDARD;
    for (name, values) in core.named_params_mut() {
        let blob = container
            .weights
            .get(&name)
            .ok_or_else(|| Error::ModelFormat(format!("missing weights for {name}")))?;
        let bytes = engine
            .decode(blob)
            .map_err(|e| Error::ModelFormat(format!("{name}: {e}")))?;
        if bytes.len() != values.len() * T::BYTE_WIDTH {
            return Err(Error::ModelFormat(format!(
                "{name}: expected {} bytes, found {}",
                values.len() * T::BYTE_WIDTH,
                bytes.len()
            )));
        }
        for (i, v) in values.iter_mut().enumerate() {
            *v = T::read_le_bytes(&bytes[i * T::BYTE_WIDTH..(i + 1) * T::BYTE_WIDTH]);
        }
    }
    Ok((container.config, core))
}

fn head_input_dim(config: &ModelConfig) -> usize {
    let feature = config.stages.last().expect("validated non-empty").out_channels;
    match config.kind {
        ModelKind::Detection => 3 * feature,
        ModelKind::Face | ModelKind::Plate => feature,
    }
}

fn check_expected_resolution(config: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    if config.input_width != expected.input_width || config.input_height != expected.input_height {
        return Err(Error::ModelResolutionMismatch {
            expected_width: expected.input_width,
            expected_height: expected.input_height,
            found_width: config.input_width,
            found_height: config.input_height,
        });
    }
    if config.task != expected.task {
        return Err(Error::ModelTaskMismatch {
            expected: expected.task,
            found: config.task,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// tensors from crops

fn tensor_from_rgb<T: Scalar>(crop: &Raster, width: u32, height: u32) -> Result<Tensor<T>> {
    if crop.channels() != 3 {
        return Err(Error::ChannelMismatch {
            a: 3,
            b: crop.channels(),
        });
    }
    let resized = crop.resize(width, height);
    let (w, h) = (width as usize, height as usize);
    let mut t = Tensor::zeros(3, h, w);
    let scale = T::from_f64(1.0 / 255.0);
    for c in 0..3usize {
        for y in 0..h {
            for x in 0..w {
                *t.at_mut(c, y, x) =
                    T::from_usize(resized.get(x as u32, y as u32, c as u8) as usize) * scale;
            }
        }
    }
    Ok(t)
}

fn tensor_from_gray<T: Scalar>(crop: &Raster, width: u32, height: u32) -> Tensor<T> {
    let resized = crop.to_gray().resize(width, height);
    let (w, h) = (width as usize, height as usize);
    let mut t = Tensor::zeros(1, h, w);
    let scale = T::from_f64(1.0 / 255.0);
    for y in 0..h {
        for x in 0..w {
            *t.at_mut(0, y, x) = T::from_usize(resized.get(x as u32, y as u32, 0) as usize) * scale;
        }
    }
    t
}

fn stack_pair<T: Scalar>(reference: &Tensor<T>, compressed: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!((reference.h, reference.w), (compressed.h, compressed.w));
    let mut data = Vec::with_capacity(reference.data.len() + compressed.data.len());
    data.extend_from_slice(&reference.data);
    data.extend_from_slice(&compressed.data);
    Tensor {
        c: reference.c + compressed.c,
        h: reference.h,
        w: reference.w,
        data,
    }
}

// ---------------------------------------------------------------------------
// detection model

pub struct PairSample<T: Scalar> {
    pub reference: Tensor<T>,
    pub compressed: Tensor<T>,
    pub target: T,
}

/// Crop-pair degradation predictor: shared backbone over both crops, MLP
/// head over `[f_ref, f_compressed, f_ref - f_compressed]`.
#[derive(Debug, Clone)]
pub struct DetectionQualityModel<T: Scalar = f32> {
    pub config: ModelConfig,
    core: Core<T>,
}

impl<T: Scalar> DetectionQualityModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.kind != ModelKind::Detection {
            return Err(Error::ModelKindMismatch {
                expected: ModelKind::Detection.as_str(),
                found: config.kind.as_str().to_string(),
            });
        }
        config.validate()?;
        let head_in = head_input_dim(&config);
        Ok(Self {
            core: Core::build(&config, head_in, seed),
            config,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.core.feature_dim()
    }

    pub fn input_tensor(&self, crop: &Raster) -> Result<Tensor<T>> {
        tensor_from_rgb(crop, self.config.input_width, self.config.input_height)
    }

    pub fn features(&self, crop: &Raster) -> Result<Vec<T>> {
        Ok(self.core.backbone.forward(&self.input_tensor(crop)?))
    }

    /// Concatenated head input: reference features, compressed features,
    /// and their difference. For byte-identical crops the difference block
    /// is exactly zero.
    pub fn head_input(f_ref: &[T], f_compressed: &[T]) -> Vec<T> {
        let mut h = Vec::with_capacity(3 * f_ref.len());
        h.extend_from_slice(f_ref);
        h.extend_from_slice(f_compressed);
        h.extend(f_ref.iter().zip(f_compressed).map(|(a, b)| *a - *b));
        h
    }

    /// Predicted degradation (Delta-Object-IoU scale, unbounded).
    pub fn predict(&self, ref_crop: &Raster, compressed_crop: &Raster) -> Result<T> {
        let f_ref = self.features(ref_crop)?;
        let f_c = self.features(compressed_crop)?;
        Ok(self.core.head.forward(&Self::head_input(&f_ref, &f_c))[0])
    }

    pub fn predict_tensors(&self, reference: &Tensor<T>, compressed: &Tensor<T>) -> T {
        let f_ref = self.core.backbone.forward(reference);
        let f_c = self.core.backbone.forward(compressed);
        self.core.head.forward(&Self::head_input(&f_ref, &f_c))[0]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container_bytes(&self.config, &self.core)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, core) = load_container_slice::<T>(bytes, ModelKind::Detection)?;
        Ok(Self { config, core })
    }

    /// Mean-squared-error loss over the batch; gradients are left in the
    /// layer buffers (zeroed first).
    pub fn loss_and_grads(&mut self, batch: &[PairSample<T>]) -> T {
        self.core.zero_grads();
        if batch.is_empty() {
            return T::zero();
        }
        let inv_b = T::one() / T::from_usize(batch.len());
        let two = T::from_f64(2.0);
        let feature = self.core.feature_dim();
        let mut loss = T::zero();
        for sample in batch {
            let (f_ref, cache_ref) = self.core.backbone.forward_cached(&sample.reference);
            let (f_c, cache_c) = self.core.backbone.forward_cached(&sample.compressed);
            let h = Self::head_input(&f_ref, &f_c);
            let (out, head_cache) = self.core.head.forward_cached(&h);
            let err = out[0] - sample.target;
            loss += err * err * inv_b;
            let dpred = two * err * inv_b;
            let dh = self.core.head.backward(&head_cache, &[dpred]);
            let mut df_ref = vec![T::zero(); feature];
            let mut df_c = vec![T::zero(); feature];
            for i in 0..feature {
                df_ref[i] = dh[i] + dh[2 * feature + i];
                df_c[i] = dh[feature + i] - dh[2 * feature + i];
            }
            self.core.backbone.backward(&cache_ref, &df_ref);
            self.core.backbone.backward(&cache_c, &df_c);
        }
        loss
    }

    pub fn loss(&self, batch: &[PairSample<T>]) -> T {
        if batch.is_empty() {
            return T::zero();
        }
        let inv_b = T::one() / T::from_usize(batch.len());
        batch.iter().fold(T::zero(), |acc, sample| {
            let f_ref = self.core.backbone.forward(&sample.reference);
            let f_c = self.core.backbone.forward(&sample.compressed);
            let err = self.core.head.forward(&Self::head_input(&f_ref, &f_c))[0] - sample.target;
            acc + err * err * inv_b
        })
    }

    pub fn adam_step(&mut self, opt: &mut Adam<T>) {
        let grads: Vec<Vec<T>> = self.core.grad_groups().iter().map(|g| g.to_vec()).collect();
        let mut params = self.core.param_groups_mut();
        let grad_refs: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut params, &grad_refs);
    }

    pub fn head_params(&self) -> Vec<T> {
        self.core
            .head
            .layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_head_params(&mut self, values: &[T]) {
        let mut it = values.iter();
        for group in self.core.head_param_groups_mut() {
            for v in group {
                *v = *it.next().expect("enough head parameter values");
            }
        }
        assert!(it.next().is_none(), "extra head parameter values");
    }

    pub fn head_grads(&self) -> Vec<T> {
        self.core
            .head_grad_groups()
            .iter()
            .flat_map(|g| g.iter().copied())
            .collect()
    }

    pub fn randomize_head(&mut self, seed: u64) {
        self.core.randomize_head(seed);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_container(path, &self.config, &self.core)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, core) = load_container::<T>(path, ModelKind::Detection)?;
        Ok(Self { config, core })
    }

    /// Load and verify the container matches an expected architecture
    /// (input resolution and task tag are checked explicitly).
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load(path)?;
        check_expected_resolution(&model.config, expected)?;
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// face model

pub struct SubsetSample<T: Scalar> {
    /// Stacked 6-channel (reference, compressed) pair tensors.
    pub pairs: Vec<Tensor<T>>,
    pub target: T,
}

/// Subset-averaged face quality model: per-pair features are averaged
/// before the one-layer regression head.
#[derive(Debug, Clone)]
pub struct FaceQualityModel<T: Scalar = f32> {
    pub config: ModelConfig,
    core: Core<T>,
}

impl<T: Scalar> FaceQualityModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.kind != ModelKind::Face {
            return Err(Error::ModelKindMismatch {
                expected: ModelKind::Face.as_str(),
                found: config.kind.as_str().to_string(),
            });
        }
        config.validate()?;
        let head_in = head_input_dim(&config);
        Ok(Self {
            core: Core::build(&config, head_in, seed),
            config,
        })
    }

    pub fn pair_tensor(&self, reference: &Raster, compressed: &Raster) -> Result<Tensor<T>> {
        let r = tensor_from_rgb(reference, self.config.input_width, self.config.input_height)?;
        let c = tensor_from_rgb(compressed, self.config.input_width, self.config.input_height)?;
        Ok(stack_pair(&r, &c))
    }

    fn pair_features(&self, pairs: &[Tensor<T>]) -> Vec<Vec<T>> {
        pairs.iter().map(|p| self.core.backbone.forward(p)).collect()
    }

    /// Predicted mean similarity delta for a set of (reference,
    /// compressed) pairs. Features are sorted into a canonical order
    /// before summation, then processed in subset-sized chunks whose head
    /// outputs are averaged, so any permutation of the input yields a
    /// bit-identical result.
    pub fn predict_pairs(&self, pairs: &[(Raster, Raster)]) -> Result<T> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("face pair list"));
        }
        let tensors = pairs
            .iter()
            .map(|(r, c)| self.pair_tensor(r, c))
            .collect::<Result<Vec<_>>>()?;
        let mut features = self.pair_features(&tensors);
        features.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.partial_cmp(y).expect("finite features"))
                .find(|o| *o != std::cmp::Ordering::Equal)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let chunk_count = features.len().div_ceil(self.config.subset_size);
        let mut total = T::zero();
        for chunk in features.chunks(self.config.subset_size) {
            let mean = mean_features(chunk);
            total += self.core.head.forward(&mean)[0];
        }
        Ok(total / T::from_usize(chunk_count))
    }

    /// Forward pass over one pre-built subset (training path; no
    /// canonicalization).
    pub fn predict_subset_tensors(&self, pairs: &[Tensor<T>]) -> T {
        let feats = self.pair_features(pairs);
        let mean = mean_features(&feats);
        self.core.head.forward(&mean)[0]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container_bytes(&self.config, &self.core)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, core) = load_container_slice::<T>(bytes, ModelKind::Face)?;
        Ok(Self { config, core })
    }

    pub fn loss_and_grads(&mut self, batch: &[SubsetSample<T>]) -> T {
        self.core.zero_grads();
        if batch.is_empty() {
            return T::zero();
        }
        let inv_b = T::one() / T::from_usize(batch.len());
        let two = T::from_f64(2.0);
        let mut loss = T::zero();
        for sample in batch {
            let n = sample.pairs.len();
            assert!(n >= 1, "subset needs at least one pair");
            let mut caches = Vec::with_capacity(n);
            let mut feats = Vec::with_capacity(n);
            for pair in &sample.pairs {
                let (f, cache) = self.core.backbone.forward_cached(pair);
                feats.push(f);
                caches.push(cache);
            }
            let mean = mean_features(&feats);
            let (out, head_cache) = self.core.head.forward_cached(&mean);
            let err = out[0] - sample.target;
            loss += err * err * inv_b;
            let dpred = two * err * inv_b;
            let dmean = self.core.head.backward(&head_cache, &[dpred]);
            let inv_n = T::one() / T::from_usize(n);
            let dfeat: Vec<T> = dmean.iter().map(|g| *g * inv_n).collect();
            for cache in &caches {
                self.core.backbone.backward(cache, &dfeat);
            }
        }
        loss
    }

    pub fn loss(&self, batch: &[SubsetSample<T>]) -> T {
        if batch.is_empty() {
            return T::zero();
        }
        let inv_b = T::one() / T::from_usize(batch.len());
        batch.iter().fold(T::zero(), |acc, sample| {
            let feats = self.pair_features(&sample.pairs);
            let mean = mean_features(&feats);
            let err = self.core.head.forward(&mean)[0] - sample.target;
            acc + err * err * inv_b
        })
    }

    pub fn adam_step(&mut self, opt: &mut Adam<T>) {
        let grads: Vec<Vec<T>> = self.core.grad_groups().iter().map(|g| g.to_vec()).collect();
        let mut params = self.core.param_groups_mut();
        let grad_refs: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut params, &grad_refs);
    }

    pub fn randomize_head(&mut self, seed: u64) {
        self.core.randomize_head(seed);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_container(path, &self.config, &self.core)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, core) = load_container::<T>(path, ModelKind::Face)?;
        Ok(Self { config, core })
    }

    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load(path)?;
        check_expected_resolution(&model.config, expected)?;
        Ok(model)
    }
}

fn mean_features<T: Scalar, F: AsRef<[T]>>(features: &[F]) -> Vec<T> {
    let n = T::from_usize(features.len());
    let dim = features[0].as_ref().len();
    let mut mean = vec![T::zero(); dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f.as_ref()) {
            *m += *v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    mean
}

// ---------------------------------------------------------------------------
// plate model

pub struct CropSample<T: Scalar> {
    pub crop: Tensor<T>,
    pub target: T,
}

/// Single-crop grayscale model predicting expected recognition quality in
/// [0, 1]: 1 means perfect recognition, 0 means the characters will be
/// misread.
#[derive(Debug, Clone)]
pub struct PlateQualityModel<T: Scalar = f32> {
    pub config: ModelConfig,
    core: Core<T>,
}

impl<T: Scalar> PlateQualityModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.kind != ModelKind::Plate {
            return Err(Error::ModelKindMismatch {
                expected: ModelKind::Plate.as_str(),
                found: config.kind.as_str().to_string(),
            });
        }
        config.validate()?;
        let head_in = head_input_dim(&config);
        Ok(Self {
            core: Core::build(&config, head_in, seed),
            config,
        })
    }

    pub fn input_tensor(&self, crop: &Raster) -> Tensor<T> {
        tensor_from_gray(crop, self.config.input_width, self.config.input_height)
    }

    pub fn predict(&self, compressed_crop: &Raster) -> T {
        let feat = self.core.backbone.forward(&self.input_tensor(compressed_crop));
        sigmoid(self.core.head.forward(&feat)[0])
    }

    pub fn predict_tensor(&self, crop: &Tensor<T>) -> T {
        let feat = self.core.backbone.forward(crop);
        sigmoid(self.core.head.forward(&feat)[0])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container_bytes(&self.config, &self.core)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, core) = load_container_slice::<T>(bytes, ModelKind::Plate)?;
        Ok(Self { config, core })
    }

    pub fn loss_and_grads(&mut self, batch: &[CropSample<T>]) -> T {
        self.core.zero_grads();
        if batch.is_empty() {
            return T::zero();
        }
        let inv_b = T::one() / T::from_usize(batch.len());
        let two = T::from_f64(2.0);
        let mut loss = T::zero();
        for sample in batch {
            let (feat, cache) = self.core.backbone.forward_cached(&sample.crop);
            let (out, head_cache) = self.core.head.forward_cached(&feat);
            let y = sigmoid(out[0]);
            let err = y - sample.target;
            loss += err * err * inv_b;
            let dz = two * err * inv_b * y * (T::one() - y);
            let dfeat = self.core.head.backward(&head_cache, &[dz]);
            self.core.backbone.backward(&cache, &dfeat);
        }
        loss
    }

    pub fn loss(&self, batch: &[CropSample<T>]) -> T {
        if batch.is_empty() {
            return T::zero();
        }
        let inv_b = T::one() / T::from_usize(batch.len());
        batch.iter().fold(T::zero(), |acc, sample| {
            let feat = self.core.backbone.forward(&sample.crop);
            let err = sigmoid(self.core.head.forward(&feat)[0]) - sample.target;
            acc + err * err * inv_b
        })
    }

    pub fn adam_step(&mut self, opt: &mut Adam<T>) {
        let grads: Vec<Vec<T>> = self.core.grad_groups().iter().map(|g| g.to_vec()).collect();
        let mut params = self.core.param_groups_mut();
        let grad_refs: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut params, &grad_refs);
    }

    pub fn randomize_head(&mut self, seed: u64) {
        self.core.randomize_head(seed);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_container(path, &self.config, &self.core)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, core) = load_container::<T>(path, ModelKind::Plate)?;
        Ok(Self { config, core })
    }

    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load(path)?;
        check_expected_resolution(&model.config, expected)?;
        Ok(model)
    }
}

/// Small architectures for unit tests and the desk-scale training recipes.
pub fn toy_config(kind: ModelKind, task: Task, side: u32) -> ModelConfig {
    let (input_width, input_height) = match kind {
        ModelKind::Plate => (side * 2, side),
        _ => (side, side),
    };
    ModelConfig {
        kind,
        task,
        input_width,
        input_height,
        stages: vec![
            ConvStage { out_channels: 12, kernel: 3, stride: 2 },
            ConvStage { out_channels: 24, kernel: 3, stride: 2 },
            ConvStage { out_channels: 32, kernel: 3, stride: 2 },
        ],
        head_hidden: if kind == ModelKind::Detection {
            vec![48]
        } else {
            Vec::new()
        },
        subset_size: if kind == ModelKind::Face { 8 } else { 1 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_crop(seed: u64, w: u32, h: u32, channels: u8) -> Raster {
        Raster::new(w, h, channels, 128).with_noise(40.0, seed)
    }

    #[test]
    fn identical_crops_zero_difference_branch() {
        let model =
            DetectionQualityModel::<f32>::new(toy_config(ModelKind::Detection, Task::Object, 32), 3)
                .unwrap();
        let crop = noise_crop(1, 40, 40, 3);
        let f1 = model.features(&crop).unwrap();
        let f2 = model.features(&crop).unwrap();
        let h = DetectionQualityModel::head_input(&f1, &f2);
        let feature = model.feature_dim();
        assert!(h[2 * feature..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_initialized_heads_predict_neutral() {
        let det =
            DetectionQualityModel::<f32>::new(toy_config(ModelKind::Detection, Task::Object, 32), 3)
                .unwrap();
        assert_eq!(det.predict(&noise_crop(1, 40, 40, 3), &noise_crop(2, 40, 40, 3)).unwrap(), 0.0);

        let face = FaceQualityModel::<f32>::new(toy_config(ModelKind::Face, Task::Face, 32), 5).unwrap();
        let pair = (noise_crop(3, 36, 36, 3), noise_crop(4, 36, 36, 3));
        assert_eq!(face.predict_pairs(std::slice::from_ref(&pair)).unwrap(), 0.0);

        let plate = PlateQualityModel::<f32>::new(toy_config(ModelKind::Plate, Task::Plate, 16), 7).unwrap();
        assert_eq!(plate.predict(&noise_crop(5, 40, 16, 3)), 0.5);
    }

    #[test]
    fn plate_output_stays_in_unit_interval() {
        let mut model =
            PlateQualityModel::<f32>::new(toy_config(ModelKind::Plate, Task::Plate, 16), 7).unwrap();
        model.core.randomize_head(11);
        for seed in 0..50 {
            let v = model.predict(&noise_crop(seed, 32, 16, 1));
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn face_prediction_is_permutation_invariant() {
        let mut model =
            FaceQualityModel::<f32>::new(toy_config(ModelKind::Face, Task::Face, 32), 5).unwrap();
        model.core.randomize_head(3);
        let pairs: Vec<(Raster, Raster)> = (0..11)
            .map(|i| (noise_crop(i, 36, 36, 3), noise_crop(100 + i, 36, 36, 3)))
            .collect();
        let forward = model.predict_pairs(&pairs).unwrap();
        let mut reversed = pairs.clone();
        reversed.reverse();
        let backward = model.predict_pairs(&reversed).unwrap();
        assert_eq!(forward.to_bits(), backward.to_bits());
    }

    #[test]
    fn face_duplicated_pair_equals_singleton() {
        let mut model =
            FaceQualityModel::<f32>::new(toy_config(ModelKind::Face, Task::Face, 32), 5).unwrap();
        model.core.randomize_head(3);
        let pair = (noise_crop(1, 36, 36, 3), noise_crop(2, 36, 36, 3));
        let single = model.predict_pairs(std::slice::from_ref(&pair)).unwrap();
        let doubled = model.predict_pairs(&[pair.clone(), pair]).unwrap();
        assert!((single - doubled).abs() < 1e-6);
    }

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut model =
            DetectionQualityModel::<f32>::new(toy_config(ModelKind::Detection, Task::Object, 32), 9)
                .unwrap();
        model.randomize_head(13);
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = DetectionQualityModel::<f32>::load(&path).unwrap();
        let probe: Vec<(Raster, Raster)> = (0..4)
            .map(|i| (noise_crop(i, 40, 40, 3), noise_crop(50 + i, 40, 40, 3)))
            .collect();
        for (r, c) in &probe {
            let a = model.predict(r, c).unwrap();
            let b = loaded.predict(r, c).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn cross_kind_load_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model =
            DetectionQualityModel::<f32>::new(toy_config(ModelKind::Detection, Task::Object, 32), 9)
                .unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        assert!(matches!(
            PlateQualityModel::<f32>::load(&path),
            Err(Error::ModelKindMismatch { .. })
        ));
    }

    #[test]
    fn wrong_resolution_is_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let model =
            DetectionQualityModel::<f32>::new(toy_config(ModelKind::Detection, Task::Object, 32), 9)
                .unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let mut expected = toy_config(ModelKind::Detection, Task::Object, 48);
        expected.input_width = 48;
        expected.input_height = 48;
        let err = DetectionQualityModel::<f32>::load_expecting(&path, &expected).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("32x32") && msg.contains("48x48"), "{msg}");
    }

    #[test]
    fn wrong_scalar_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model =
            DetectionQualityModel::<f32>::new(toy_config(ModelKind::Detection, Task::Object, 32), 9)
                .unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        assert!(matches!(
            DetectionQualityModel::<f64>::load(&path),
            Err(Error::ModelScalarMismatch { .. })
        ));
    }
}
