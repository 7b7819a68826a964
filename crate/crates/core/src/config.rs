//! Run configuration: flat `key = value` files merged with command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::{AugmentationPolicy, ResizeMode, SplitSpec};
use crate::evaluation::DEFAULT_AUDIT_THRESHOLD;
use crate::models::ModelKind;
use crate::training::{DeviceKind, OptimizerKind, StepDecay, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}: unknown key {key:?}")]
    UnknownKey { origin: String, key: String },
    #[error("{origin}: bad value {value:?} for {key}: {reason}")]
    BadValue {
        origin: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("{origin}: expected `key = value`, got {line:?}")]
    Syntax { origin: String, line: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Where an effective value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

/// Every tunable of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub labels: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub offline: bool,
    pub include_machine: bool,
    pub n: usize,
    pub ratio: f64,
    pub train_fraction: f64,
    pub stratified: bool,
    pub data_seed: u64,
    pub model_seed: u64,
    pub augment_seed: u64,
    pub model: ModelKind,
    pub pretrained: bool,
    pub weights_dir: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub lr_decay_every: usize,
    pub lr_decay_gamma: f64,
    pub device: DeviceKind,
    pub save_best: bool,
    pub resize: u32,
    pub resize_mode: ResizeMode,
    pub crop: u32,
    pub rotation: f32,
    pub hflip: f64,
    pub checkpoint: Option<PathBuf>,
    pub test_split: Option<PathBuf>,
    pub tau: f64,
    pub grid_k: usize,
    pub parallelism: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let policy = AugmentationPolicy::default();
        let train = TrainConfig::default();
        let split = SplitSpec::default();
        RunConfig {
            labels: None,
            metadata: None,
            index: None,
            out_dir: PathBuf::from("ladi-out"),
            cache_dir: None,
            offline: false,
            include_machine: false,
            n: 2000,
            ratio: 0.5,
            train_fraction: split.train_fraction,
            stratified: split.stratified,
            data_seed: 0,
            model_seed: 0,
            augment_seed: 0,
            model: ModelKind::ResNet101,
            pretrained: true,
            weights_dir: None,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            optimizer: train.optimizer,
            lr_decay_every: 0,
            lr_decay_gamma: 0.1,
            device: train.device,
            save_best: train.save_best,
            resize: policy.resize_target,
            resize_mode: policy.resize_mode,
            crop: policy.crop_size,
            rotation: policy.max_rotation_deg,
            hflip: policy.hflip_prob,
            checkpoint: None,
            test_split: None,
            tau: DEFAULT_AUDIT_THRESHOLD,
            grid_k: 15,
            parallelism: 4,
        }
    }
}

/// Documentation for each key; the command-line flag is the key with
/// dashes.
pub const KEYS: &[(&str, &str)] = &[
    ("labels", "Annotation table (CSV or JSONL) with image_id, category, label and optionally url, annotator"),
    ("metadata", "Optional image metadata table supplying url per image_id"),
    ("index", "Curated index file [default: <out-dir>/index.csv]"),
    ("out_dir", "Root directory for every output file"),
    ("cache_dir", "Image cache directory [default: $LADI_CACHE_DIR, else <out-dir>/cache]"),
    ("offline", "Never download; only local or cached images resolve"),
    ("include_machine", "Keep machine-generated annotation rows"),
    ("n", "Number of images in the balanced draw"),
    ("ratio", "Fraction of flood images in the draw"),
    ("train_fraction", "Fraction of the draw used for training"),
    ("stratified", "Split each class separately"),
    ("data_seed", "Seed for drawing, splitting and grid selection"),
    ("model_seed", "Seed for weight initialization and dropout"),
    ("augment_seed", "Seed for shuffling and augmentation"),
    ("model", "cnn4, resnet34, resnet50, resnet101, alexnet, densenet161 or mobilenetv2"),
    ("pretrained", "Start backbones from ImageNet weights (ignored for cnn4)"),
    ("weights_dir", "Directory of <model>.safetensors backbone weights [default: $LADI_WEIGHTS_DIR]"),
    ("epochs", "Training epochs"),
    ("batch_size", "Mini-batch size"),
    ("learning_rate", "Optimizer learning rate"),
    ("optimizer", "adam or sgd_momentum"),
    ("lr_decay_every", "Multiply the learning rate by lr_decay_gamma every this many epochs (0 disables)"),
    ("lr_decay_gamma", "Learning-rate decay factor"),
    ("device", "cpu or accelerator"),
    ("save_best", "Also save the lowest-loss epoch as <checkpoint>.best.safetensors"),
    ("resize", "Resize target in pixels"),
    ("resize_mode", "shorter-side or width"),
    ("crop", "Square crop size; also the model input size"),
    ("rotation", "Maximum random rotation in degrees"),
    ("hflip", "Horizontal flip probability"),
    ("checkpoint", "Checkpoint weights file [default: <out-dir>/model.safetensors]"),
    ("test_split", "Test split CSV written by `sample` or `train` [default: re-derived from the checkpoint]"),
    ("tau", "Audit confidence threshold"),
    ("grid_k", "Number of images in the prediction grid"),
    ("parallelism", "Concurrent image fetches"),
];

fn parse<T: FromStr>(origin: &str, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        origin: origin.to_string(),
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_bool(origin: &str, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue {
            origin: origin.to_string(),
            key: key.to_string(),
            value: value.to_string(),
            reason: "expected true or false".into(),
        }),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

pub fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str, origin: &str) -> Result<(), ConfigError> {
        let key = normalize_key(key);
        let value = value.trim();
        let k = key.as_str();
        match k {
            "labels" => self.labels = opt_path(value),
            "metadata" => self.metadata = opt_path(value),
            "index" => self.index = opt_path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "cache_dir" => self.cache_dir = opt_path(value),
            "offline" => self.offline = parse_bool(origin, k, value)?,
            "include_machine" => self.include_machine = parse_bool(origin, k, value)?,
            "n" => self.n = parse(origin, k, value)?,
            "ratio" => self.ratio = parse(origin, k, value)?,
            "train_fraction" => self.train_fraction = parse(origin, k, value)?,
            "stratified" => self.stratified = parse_bool(origin, k, value)?,
            "data_seed" => self.data_seed = parse(origin, k, value)?,
            "model_seed" => self.model_seed = parse(origin, k, value)?,
            "augment_seed" => self.augment_seed = parse(origin, k, value)?,
            "model" => self.model = parse(origin, k, value)?,
            "pretrained" => self.pretrained = parse_bool(origin, k, value)?,
            "weights_dir" => self.weights_dir = opt_path(value),
            "epochs" => self.epochs = parse(origin, k, value)?,
            "batch_size" => self.batch_size = parse(origin, k, value)?,
            "learning_rate" => self.learning_rate = parse(origin, k, value)?,
            "optimizer" => self.optimizer = parse(origin, k, value)?,
            "lr_decay_every" => self.lr_decay_every = parse(origin, k, value)?,
            "lr_decay_gamma" => self.lr_decay_gamma = parse(origin, k, value)?,
            "device" => self.device = parse(origin, k, value)?,
            "save_best" => self.save_best = parse_bool(origin, k, value)?,
            "resize" => self.resize = parse(origin, k, value)?,
            "resize_mode" => self.resize_mode = parse(origin, k, value)?,
            "crop" => self.crop = parse(origin, k, value)?,
            "rotation" => self.rotation = parse(origin, k, value)?,
            "hflip" => self.hflip = parse(origin, k, value)?,
            "checkpoint" => self.checkpoint = opt_path(value),
            "test_split" => self.test_split = opt_path(value),
            "tau" => self.tau = parse(origin, k, value)?,
            "grid_k" => self.grid_k = parse(origin, k, value)?,
            "parallelism" => self.parallelism = parse(origin, k, value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    origin: origin.to_string(),
                    key,
                })
            }
        }
        Ok(())
    }

    /// Textual value of `key`; empty for unset optional paths.
    pub fn get(&self, key: &str) -> Option<String> {
        let v = match normalize_key(key).as_str() {
            "labels" => show_path(&self.labels),
            "metadata" => show_path(&self.metadata),
            "index" => show_path(&self.index),
            "out_dir" => self.out_dir.display().to_string(),
            "cache_dir" => show_path(&self.cache_dir),
            "offline" => self.offline.to_string(),
            "include_machine" => self.include_machine.to_string(),
            "n" => self.n.to_string(),
            "ratio" => self.ratio.to_string(),
            "train_fraction" => self.train_fraction.to_string(),
            "stratified" => self.stratified.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "model_seed" => self.model_seed.to_string(),
            "augment_seed" => self.augment_seed.to_string(),
            "model" => self.model.id().to_string(),
            "pretrained" => self.pretrained.to_string(),
            "weights_dir" => show_path(&self.weights_dir),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "optimizer" => match self.optimizer {
                OptimizerKind::Adam => "adam".into(),
                OptimizerKind::SgdMomentum => "sgd_momentum".into(),
            },
            "lr_decay_every" => self.lr_decay_every.to_string(),
            "lr_decay_gamma" => self.lr_decay_gamma.to_string(),
            "device" => match self.device {
                DeviceKind::Cpu => "cpu".into(),
                DeviceKind::Accelerator => "accelerator".into(),
            },
            "save_best" => self.save_best.to_string(),
            "resize" => self.resize.to_string(),
            "resize_mode" => match self.resize_mode {
                ResizeMode::ShorterSide => "shorter-side".into(),
                ResizeMode::Width => "width".into(),
            },
            "crop" => self.crop.to_string(),
            "rotation" => self.rotation.to_string(),
            "hflip" => self.hflip.to_string(),
            "checkpoint" => show_path(&self.checkpoint),
            "test_split" => show_path(&self.test_split),
            "tau" => self.tau.to_string(),
            "grid_k" => self.grid_k.to_string(),
            "parallelism" => self.parallelism.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<Vec<String>, ConfigError> {
        let mut keys = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{origin}:{}", no + 1);
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: at.clone(),
                line: raw.to_string(),
            })?;
            self.set(key, value, &at)?;
            keys.push(normalize_key(key));
        }
        Ok(keys)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<Vec<String>, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Serialized `key = value` form; reading it back yields the same config.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn index_path(&self) -> PathBuf {
        self.index.clone().unwrap_or_else(|| self.out_dir.join("index.csv"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.safetensors"))
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"))
    }

    pub fn policy(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            resize_target: self.resize,
            resize_mode: self.resize_mode,
            max_rotation_deg: self.rotation,
            crop_size: self.crop,
            hflip_prob: self.hflip,
            ..Default::default()
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.train_fraction,
            stratified: self.stratified,
            seed: self.data_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            seed: self.augment_seed,
            device: self.device,
            lr_decay: (self.lr_decay_every > 0).then_some(StepDecay {
                every: self.lr_decay_every,
                gamma: self.lr_decay_gamma,
            }),
            save_best: self.save_best,
            progress: true,
        }
    }
}

/// Effective configuration with the source of every value.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub sources: BTreeMap<String, Source>,
}

impl Resolved {
    /// Defaults, then `file`, then `flags` (already-normalized keys).
    pub fn build(file: Option<&Path>, flags: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        let mut sources: BTreeMap<String, Source> =
            KEYS.iter().map(|(k, _)| (k.to_string(), Source::Default)).collect();
        if let Some(path) = file {
            for key in config.apply_file(path)? {
                sources.insert(key, Source::File);
            }
        }
        for (key, value) in flags {
            config.set(key, value, &format!("--{}", key.replace('_', "-")))?;
            sources.insert(normalize_key(key), Source::Flag);
        }
        Ok(Resolved { config, sources })
    }

    /// (key, value, source) for every key.
    pub fn effective(&self) -> Vec<(String, String, Source)> {
        KEYS.iter()
            .map(|(k, _)| {
                (
                    k.to_string(),
                    self.config.get(k).unwrap_or_default(),
                    self.sources[*k],
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let config = RunConfig::default();
        for (key, _) in KEYS {
            let value = config.get(key).unwrap();
            let mut copy = RunConfig::default();
            copy.set(key, &value, "test").unwrap();
            assert_eq!(copy, config, "{key}");
        }
        let mut back = RunConfig::default();
        back.model = ModelKind::Cnn4;
        back.apply_text(&config.to_text(), "text").unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn file_then_flags_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nepochs = 5\nmodel=cnn4\n\nbatch-size = 8 # inline\n").unwrap();
        let flags = vec![("epochs".to_string(), "2".to_string())];
        let r = Resolved::build(Some(&path), &flags).unwrap();
        assert_eq!(r.config.epochs, 2);
        assert_eq!(r.config.model, ModelKind::Cnn4);
        assert_eq!(r.config.batch_size, 8);
        assert_eq!(r.sources["epochs"], Source::Flag);
        assert_eq!(r.sources["model"], Source::File);
        assert_eq!(r.sources["n"], Source::Default);
        assert_eq!(r.effective().len(), KEYS.len());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        let mut c = RunConfig::default();
        assert!(matches!(
            c.apply_text("epochz = 3\n", "f"),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(matches!(c.apply_text("epochs = -1\n", "f"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(c.apply_text("just words\n", "f"), Err(ConfigError::Syntax { .. })));
        let err = c.apply_text("\nmodel = vgg\n", "cfg").unwrap_err().to_string();
        assert!(err.contains("cfg:2"), "{err}");
    }

    #[test]
    fn defaults_follow_module_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.n, c.ratio, c.train_fraction), (2000, 0.5, 0.8));
        assert_eq!((c.epochs, c.tau, c.grid_k), (30, 0.9, 15));
        assert_eq!(c.policy(), AugmentationPolicy::default());
        assert_eq!(c.index_path(), Path::new("ladi-out/index.csv"));
    }
}
