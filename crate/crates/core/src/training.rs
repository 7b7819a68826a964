//! Mini-batch training loop, cross-entropy loss and checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::nn::{self, OptimizerConfig};
use tch::{Device, Kind, Tensor};
use thiserror::Error;

use crate::catalog::Label;
use crate::dataset::{
    augment_resized, center_crop_normalized, resize, sample_rng, AugmentationPolicy, DatasetError,
    ImageArray, RgbImage, SplitSpec,
};
use crate::models::{build_model, images_to_tensor, torch_rng_guard, BuildOptions, Cnn4Dims, ModelError, ModelHandle, ModelSpec};

pub const CHECKPOINT_FORMAT: &str = "ladi-flood-checkpoint/1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("out of memory with batch size {batch_size}; try a smaller --batch-size ({detail})")]
    OutOfMemory { batch_size: usize, detail: String },
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("torch: {0}")]
    Torch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd_momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            other => Err(format!("unknown optimizer {other:?} (expected adam or sgd_momentum)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Cpu,
    Accelerator,
}

impl DeviceKind {
    pub fn device(self) -> Device {
        match self {
            DeviceKind::Cpu => Device::Cpu,
            DeviceKind::Accelerator => Device::cuda_if_available(),
        }
    }
}

impl FromStr for DeviceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cpu" => Ok(DeviceKind::Cpu),
            "accelerator" | "cuda" | "gpu" => Ok(DeviceKind::Accelerator),
            other => Err(format!("unknown device {other:?} (expected cpu or accelerator)")),
        }
    }
}

/// Multiply the learning rate by `gamma` every `every` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Shuffling and augmentation seed.
    pub seed: u64,
    pub device: DeviceKind,
    pub lr_decay: Option<StepDecay>,
    /// Also keep the weights of the lowest-loss epoch.
    pub save_best: bool,
    /// Print per-epoch progress on standard error.
    #[serde(skip)]
    pub progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            device: DeviceKind::Cpu,
            lr_decay: None,
            save_best: false,
            progress: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(decay) = self.lr_decay {
            if decay.every == 0 || !(decay.gamma > 0.0) {
                return Err(TrainError::InvalidConfig("lr decay needs every >= 1 and gamma > 0".into()));
            }
        }
        Ok(())
    }

    /// Short stable digest of the serialized config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// One resized training image.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image_id: String,
    pub image: RgbImage,
    pub label: Label,
}

/// Training images held at their resized resolution; random rotation, crop
/// and flip are applied per epoch.
#[derive(Debug, Clone)]
pub struct TrainSet {
    examples: Vec<TrainExample>,
    policy: AugmentationPolicy,
    augment: bool,
}

impl TrainSet {
    /// `images` are resized once here according to `policy`.
    pub fn new(
        images: Vec<(String, RgbImage, Label)>,
        policy: AugmentationPolicy,
    ) -> Result<Self, TrainError> {
        policy.validate()?;
        let examples = images
            .into_iter()
            .map(|(image_id, image, label)| {
                Ok(TrainExample {
                    image_id,
                    image: resize(&image, &policy)?,
                    label,
                })
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        Ok(TrainSet {
            examples,
            policy,
            augment: true,
        })
    }

    /// Use the deterministic center crop instead of random augmentation.
    pub fn without_augmentation(mut self) -> Self {
        self.augment = false;
        self
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn policy(&self) -> &AugmentationPolicy {
        &self.policy
    }

    fn transform(&self, i: usize, seed: u64, epoch: usize) -> Result<ImageArray, DatasetError> {
        let ex = &self.examples[i];
        if self.augment {
            let mut rng = sample_rng(seed, &ex.image_id, epoch);
            Ok(augment_resized(&ex.image, &self.policy, &mut rng)?.0)
        } else {
            center_crop_normalized(&ex.image, &self.policy)
        }
    }

    /// Tensors for the examples at `indices`.
    pub fn batch(
        &self,
        indices: &[usize],
        seed: u64,
        epoch: usize,
        kind: Kind,
    ) -> Result<(Tensor, Tensor), TrainError> {
        let images = indices
            .iter()
            .map(|&i| self.transform(i, seed, epoch))
            .collect::<Result<Vec<_>, _>>()?;
        let xs = images_to_tensor(&images, kind)?;
        let labels: Vec<i64> = indices
            .iter()
            .map(|&i| self.examples[i].label.as_u8() as i64)
            .collect();
        Ok((xs, Tensor::from_slice(&labels)))
    }
}

/// Mean two-class cross-entropy of `logits` (B × 2) against `labels` (B).
pub fn loss_fn(logits: &Tensor, labels: &Tensor) -> Result<Tensor, TrainError> {
    let ls = logits.size();
    let ys = labels.size();
    if ls.len() != 2 || ys.len() != 1 || ls[0] != ys[0] {
        return Err(TrainError::ShapeMismatch(format!(
            "logits {ls:?} vs labels {ys:?}"
        )));
    }
    // the tch helper forces f32; keep the logits dtype so f64 checks stay exact
    Ok(logits.log_softmax(-1, logits.kind()).nll_loss(labels))
}

/// Optimizer plus the epoch-level learning-rate bookkeeping.
pub struct OptimizerState {
    optimizer: nn::Optimizer,
    base_lr: f64,
}

impl OptimizerState {
    pub fn new(handle: &ModelHandle, config: &TrainConfig) -> Result<Self, TrainError> {
        let vs = handle.var_store();
        let optimizer = match config.optimizer {
            OptimizerKind::Adam => nn::Adam::default().build(vs, config.learning_rate),
            OptimizerKind::SgdMomentum => nn::Sgd {
                momentum: 0.9,
                ..Default::default()
            }
            .build(vs, config.learning_rate),
        }
        .map_err(|e| TrainError::Torch(e.to_string()))?;
        Ok(OptimizerState {
            optimizer,
            base_lr: config.learning_rate,
        })
    }

    /// Zero learning rate; used to probe the loss without moving weights.
    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.optimizer.set_lr(lr);
        self.base_lr = lr;
        self
    }

    fn start_epoch(&mut self, epoch: usize, decay: Option<StepDecay>) {
        if let Some(StepDecay { every, gamma }) = decay {
            let lr = self.base_lr * gamma.powi((epoch / every) as i32);
            self.optimizer.set_lr(lr);
        }
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

/// One gradient update on a batch; returns the pre-update loss and the
/// number of correct argmax predictions.
pub fn train_step(
    handle: &ModelHandle,
    xs: &Tensor,
    labels: &Tensor,
    state: &mut OptimizerState,
) -> Result<(f64, usize), TrainError> {
    let spec = handle.spec();
    let size = xs.size();
    let expected = [size.first().copied().unwrap_or(0), 3, spec.input_size, spec.input_size];
    if size != expected {
        return Err(TrainError::ShapeMismatch(format!(
            "batch {size:?}, model expects {expected:?}"
        )));
    }
    if labels.size() != [size[0]] {
        return Err(TrainError::ShapeMismatch(format!(
            "{} images but labels of shape {:?}",
            size[0],
            labels.size()
        )));
    }
    let device = handle.device();
    let xs = xs.to_device(device).to_kind(handle.kind());
    let labels = labels.to_device(device);
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| {
        let logits = handle.forward_t(&xs, true);
        let loss = loss_fn(&logits, &labels)?;
        let value = loss.double_value(&[]);
        let correct = logits
            .argmax(-1, false)
            .eq_tensor(&labels)
            .sum(Kind::Int64)
            .int64_value(&[]) as usize;
        if value.is_finite() {
            state.optimizer.backward_step(&loss);
        }
        Ok::<_, TrainError>((value, correct))
    }));
    match outcome {
        Ok(result) => result,
        Err(payload) => {
            let msg = panic_message(payload);
            if msg.contains("out of memory") || msg.contains("can't allocate") || msg.contains("not enough memory") {
                Err(TrainError::OutOfMemory {
                    batch_size: size[0] as usize,
                    detail: msg.lines().next().unwrap_or_default().to_string(),
                })
            } else {
                Err(TrainError::Torch(msg))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), TrainError> {
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        for entry in &self.epochs {
            let line = serde_json::to_string(entry).expect("epoch log serializes");
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| TrainError::InvalidConfig(e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(TrainLog {
            epochs,
            checkpoint: None,
        })
    }

    /// (epoch, loss, accuracy) triples; wall times excluded.
    pub fn deterministic_part(&self) -> Vec<(usize, f64, f64)> {
        self.epochs
            .iter()
            .map(|e| (e.epoch, e.mean_loss, e.train_accuracy))
            .collect()
    }

    pub fn summary_table(&self) -> String {
        let mut out = String::from("epoch  mean_loss  train_acc  time_s\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{:>5}  {:>9.5}  {:>9.4}  {:>6.1}\n",
                e.epoch, e.mean_loss, e.train_accuracy, e.wall_time_s
            ));
        }
        out
    }
}

/// Where the data behind a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataProvenance {
    pub index: String,
    pub data_seed: u64,
    pub n: usize,
    pub ratio: f64,
    pub split: SplitSpec,
}

/// JSON sidecar stored next to the weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    #[serde(flatten)]
    pub spec: ModelSpec,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cnn4_dims: Option<Cnn4Dims>,
    pub train_config: TrainConfig,
    pub train_config_digest: String,
    pub policy: AugmentationPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataProvenance>,
}

impl CheckpointMeta {
    pub fn new(spec: ModelSpec, model_seed: u64, config: &TrainConfig, policy: AugmentationPolicy) -> Self {
        CheckpointMeta {
            format: CHECKPOINT_FORMAT.to_string(),
            spec,
            seed: model_seed,
            cnn4_dims: None,
            train_config: config.clone(),
            train_config_digest: config.digest(),
            policy,
            data: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: PathBuf,
    pub meta: CheckpointMeta,
}

/// Sidecar path for a weights file: `model.safetensors` → `model.json`.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn save_checkpoint(handle: &ModelHandle, meta: &CheckpointMeta, weights: &Path) -> Result<Checkpoint, TrainError> {
    handle.save_weights(weights)?;
    let sidecar = sidecar_path(weights);
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&sidecar, json + "\n").map_err(|source| TrainError::Io {
        path: sidecar.clone(),
        source,
    })?;
    Ok(Checkpoint {
        weights: weights.to_path_buf(),
        meta: meta.clone(),
    })
}

/// Load a checkpoint given either its weights file or its JSON sidecar.
pub fn load_checkpoint(path: &Path) -> Result<(ModelHandle, CheckpointMeta), CheckpointError> {
    let (weights, sidecar) = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => (path.with_extension("safetensors"), path.to_path_buf()),
        _ => (path.to_path_buf(), sidecar_path(path)),
    };
    let corrupt = |reason: String| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(&sidecar).map_err(|source| CheckpointError::Io {
        path: sidecar.clone(),
        source,
    })?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| corrupt(format!("sidecar: {e}")))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(corrupt(format!("unsupported format {:?}", meta.format)));
    }
    // weights come from the checkpoint itself, not the pretrained cache
    let spec = meta.spec.pretrained(false);
    let options = BuildOptions {
        seed: meta.seed,
        cnn4_dims: meta.cnn4_dims.unwrap_or_default(),
        ..Default::default()
    };
    let mut handle = build_model(&spec, &options).map_err(|e| corrupt(e.to_string()))?;
    if !weights.is_file() {
        return Err(CheckpointError::Io {
            path: weights.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "weights file missing"),
        });
    }
    handle
        .load_weights(&weights)
        .map_err(|e| corrupt(format!("weights: {e}")))?;
    Ok((handle.with_spec(meta.spec), meta))
}

/// Where [`train`] writes its checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub weights: PathBuf,
    pub meta: CheckpointMeta,
}

/// Run `config.epochs` passes of shuffled mini-batches over `train_set`.
pub fn train(
    handle: &ModelHandle,
    train_set: &TrainSet,
    config: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<(Option<Checkpoint>, TrainLog), TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut state = OptimizerState::new(handle, config)?;
    let _torch_rng = torch_rng_guard();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog::default();
    let started = Instant::now();
    let mut best_loss = f64::INFINITY;

    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        state.start_epoch(epoch, config.lr_decay);
        order.shuffle(&mut rng);
        // dropout masks depend on the torch generator
        tch::manual_seed(config.seed.wrapping_add(epoch as u64) as i64);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (xs, ys) = train_set.batch(chunk, config.seed, epoch, handle.kind())?;
            let (loss, ok) = train_step(handle, &xs, &ys, &mut state)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch: epoch + 1, batch: b });
            }
            loss_sum += loss * chunk.len() as f64;
            correct += ok;
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            mean_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            wall_time_s: epoch_start.elapsed().as_secs_f64(),
        };
        if config.progress {
            let elapsed = started.elapsed().as_secs_f64();
            let eta = elapsed / (epoch + 1) as f64 * (config.epochs - epoch - 1) as f64;
            eprintln!(
                "epoch {}/{}  loss {:.4}  acc {:.3}  eta {:.0}s",
                entry.epoch, config.epochs, entry.mean_loss, entry.train_accuracy, eta
            );
        }
        if config.save_best && entry.mean_loss < best_loss {
            best_loss = entry.mean_loss;
            if let Some(sink) = sink {
                save_checkpoint(handle, &sink.meta, &best_path(&sink.weights))?;
            }
        }
        log.epochs.push(entry);
    }

    let checkpoint = match sink {
        Some(sink) => {
            let ckpt = save_checkpoint(handle, &sink.meta, &sink.weights)?;
            log.checkpoint = Some(ckpt.weights.clone());
            Some(ckpt)
        }
        None => None,
    };
    Ok((checkpoint, log))
}

/// `model.safetensors` → `model.best.safetensors`.
pub fn best_path(weights: &Path) -> PathBuf {
    let stem = weights.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    weights.with_file_name(format!("{stem}.best.safetensors"))
}
