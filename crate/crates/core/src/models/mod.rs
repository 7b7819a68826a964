//! The seven-architecture classifier zoo.
//!
//! Backbones follow their torchvision definitions and parameter names so that
//! exported torchvision weights load directly; only the final classifier is
//! replaced by a freshly initialized two-way head.

mod zoo;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use tch::nn::{self, ModuleT};
use tch::{Device, Kind, Tensor};
use thiserror::Error;

use crate::dataset::ImageArray;

pub use zoo::Cnn4Dims;

/// Environment variable naming the directory of pretrained backbone weights.
pub const WEIGHTS_ENV_VAR: &str = "LADI_WEIGHTS_DIR";

static TORCH_RNG: Mutex<()> = Mutex::new(());

/// Torch's CPU generator is process-wide. Hold this guard while seeding it
/// and consuming random numbers so concurrent runs stay reproducible.
pub fn torch_rng_guard() -> MutexGuard<'static, ()> {
    TORCH_RNG.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("pretrained weights for {kind} unavailable: {reason}")]
    UnavailableWeights { kind: ModelKind, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("torch: {0}")]
    Torch(#[from] tch::TchError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cnn4,
    ResNet34,
    ResNet50,
    ResNet101,
    AlexNet,
    DenseNet161,
    MobileNetV2,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Cnn4,
        ModelKind::ResNet34,
        ModelKind::ResNet50,
        ModelKind::ResNet101,
        ModelKind::AlexNet,
        ModelKind::DenseNet161,
        ModelKind::MobileNetV2,
    ];

    /// Command-line / file-name identifier.
    pub fn id(self) -> &'static str {
        match self {
            ModelKind::Cnn4 => "cnn4",
            ModelKind::ResNet34 => "resnet34",
            ModelKind::ResNet50 => "resnet50",
            ModelKind::ResNet101 => "resnet101",
            ModelKind::AlexNet => "alexnet",
            ModelKind::DenseNet161 => "densenet161",
            ModelKind::MobileNetV2 => "mobilenetv2",
        }
    }

    /// Human-readable name used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Cnn4 => "4-Layer CNN",
            ModelKind::ResNet34 => "ResNet34",
            ModelKind::ResNet50 => "ResNet50",
            ModelKind::ResNet101 => "ResNet101",
            ModelKind::AlexNet => "AlexNet",
            ModelKind::DenseNet161 => "DenseNet161",
            ModelKind::MobileNetV2 => "MobileNetV2",
        }
    }

    /// Parameter-name prefix of the classification head.
    pub fn head_prefix(self) -> &'static str {
        match self {
            ModelKind::Cnn4 => "fc2.",
            ModelKind::ResNet34 | ModelKind::ResNet50 | ModelKind::ResNet101 => "fc.",
            ModelKind::AlexNet => "classifier.6.",
            ModelKind::DenseNet161 => "classifier.",
            ModelKind::MobileNetV2 => "classifier.1.",
        }
    }

    /// Smallest square input the feature stack can reduce without a pooling
    /// window outgrowing its input.
    pub fn min_input_size(self) -> i64 {
        match self {
            ModelKind::AlexNet => 63,
            ModelKind::DenseNet161 => 29,
            _ => 1,
        }
    }

    pub fn has_pretrained_weights(self) -> bool {
        self != ModelKind::Cnn4
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        ModelKind::ALL
            .into_iter()
            .find(|k| k.id() == key || (key == "4layercnn" && *k == ModelKind::Cnn4))
            .ok_or_else(|| {
                let names: Vec<_> = ModelKind::ALL.iter().map(|k| k.id()).collect();
                format!("unknown model {s:?} (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub pretrained: bool,
    pub num_classes: i64,
    pub input_size: i64,
}

impl ModelSpec {
    /// Defaults: pretrained for every backbone, two classes, 250 px input.
    pub fn new(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            pretrained: kind.has_pretrained_weights(),
            num_classes: 2,
            input_size: 250,
        }
    }

    pub fn pretrained(mut self, pretrained: bool) -> Self {
        self.pretrained = pretrained;
        self
    }

    pub fn input_size(mut self, input_size: i64) -> Self {
        self.input_size = input_size;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.kind == ModelKind::Cnn4 && self.pretrained {
            return Err(ModelError::InvalidSpec("cnn4 has no pretrained weights".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        let min = self.kind.min_input_size();
        if self.input_size < min {
            return Err(ModelError::InvalidSpec(format!(
                "{} needs input_size >= {min}, got {}",
                self.kind, self.input_size
            )));
        }
        Ok(())
    }
}

/// Construction options that are not part of the model's identity.
#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Seeds head (and, without pretraining, all) initialization.
    pub seed: u64,
    /// Directory holding `<kind>.safetensors` backbone weights.
    pub weights_dir: Option<PathBuf>,
    pub kind: Kind,
    pub device: Device,
    /// Overrides the standard four-layer CNN widths.
    pub cnn4_dims: Cnn4Dims,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            seed: 0,
            weights_dir: None,
            kind: Kind::Float,
            device: Device::Cpu,
            cnn4_dims: Cnn4Dims::default(),
        }
    }
}

/// Default location of pretrained weights: `$LADI_WEIGHTS_DIR`, else
/// `$XDG_CACHE_HOME/ladi-flood/weights` or `~/.cache/ladi-flood/weights`.
pub fn default_weights_dir() -> Option<PathBuf> {
    if let Some(dir) = std::env::var_os(WEIGHTS_ENV_VAR).filter(|d| !d.is_empty()) {
        return Some(PathBuf::from(dir));
    }
    let cache = std::env::var_os("XDG_CACHE_HOME")
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache")))?;
    Some(cache.join("ladi-flood").join("weights"))
}

/// A built network together with its variables.
pub struct ModelHandle {
    spec: ModelSpec,
    vs: nn::VarStore,
    net: Box<dyn ModuleT>,
}

impl std::fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHandle")
            .field("spec", &self.spec)
            .field("variables", &self.vs.len())
            .finish()
    }
}

fn instantiate(spec: &ModelSpec, dims: Cnn4Dims, root: &nn::Path) -> Box<dyn ModuleT> {
    let nc = spec.num_classes;
    use tch::vision::{mobilenet, resnet};
    match spec.kind {
        ModelKind::Cnn4 => Box::new(zoo::cnn4(root, spec.input_size, nc, dims)),
        ModelKind::ResNet34 => Box::new(resnet::resnet34(root, nc)),
        ModelKind::ResNet50 => Box::new(resnet::resnet50(root, nc)),
        ModelKind::ResNet101 => Box::new(resnet::resnet101(root, nc)),
        ModelKind::AlexNet => Box::new(zoo::alexnet(root, nc)),
        ModelKind::DenseNet161 => Box::new(zoo::densenet161(root, nc)),
        ModelKind::MobileNetV2 => Box::new(mobilenet::v2(root, nc)),
    }
}

/// Build a zoo model with a two-way head. Pretrained backbones are loaded from
/// the weights directory; missing weights are an error, never a silent
/// fallback to random initialization.
pub fn build_model(spec: &ModelSpec, options: &BuildOptions) -> Result<ModelHandle, ModelError> {
    spec.validate()?;
    let _rng = torch_rng_guard();
    tch::manual_seed(options.seed as i64);
    let mut vs = nn::VarStore::new(options.device);
    let net = instantiate(spec, options.cnn4_dims, &vs.root());
    if options.kind != Kind::Float {
        vs.set_kind(options.kind);
    }
    let handle = ModelHandle {
        spec: *spec,
        vs,
        net,
    };
    if spec.pretrained {
        let dir = options
            .weights_dir
            .clone()
            .or_else(default_weights_dir)
            .ok_or_else(|| ModelError::UnavailableWeights {
                kind: spec.kind,
                reason: "no weights directory configured".into(),
            })?;
        handle.load_backbone(&dir.join(format!("{}.safetensors", spec.kind.id())))?;
    }
    Ok(handle)
}

impl ModelHandle {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Replace the recorded spec; the architecture must be unchanged.
    pub(crate) fn with_spec(mut self, spec: ModelSpec) -> Self {
        debug_assert_eq!((spec.kind, spec.num_classes), (self.spec.kind, self.spec.num_classes));
        self.spec = spec;
        self
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn kind(&self) -> Kind {
        self.vs.kind()
    }

    pub fn device(&self) -> Device {
        self.vs.device()
    }

    /// Copy every non-head variable from a pretrained weights file.
    pub fn load_backbone(&self, path: &Path) -> Result<(), ModelError> {
        let unavailable = |reason: String| ModelError::UnavailableWeights {
            kind: self.spec.kind,
            reason,
        };
        if !path.is_file() {
            return Err(unavailable(format!("{} not found", path.display())));
        }
        let tensors: HashMap<String, Tensor> = Tensor::read_safetensors(path)
            .map_err(|e| unavailable(format!("{}: {e}", path.display())))?
            .into_iter()
            .collect();
        let head = self.spec.kind.head_prefix();
        for (name, mut var) in self.vs.variables() {
            if name.starts_with(head) {
                continue;
            }
            let src = tensors
                .get(&name)
                .ok_or_else(|| unavailable(format!("{} lacks {name}", path.display())))?;
            if src.size() != var.size() {
                return Err(unavailable(format!(
                    "{name}: expected shape {:?}, file has {:?}",
                    var.size(),
                    src.size()
                )));
            }
            tch::no_grad(|| var.f_copy_(&src.to_kind(var.kind())))?;
        }
        Ok(())
    }

    /// Raw logits; `train` toggles dropout and batch-norm statistics.
    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        self.net.forward_t(xs, train)
    }

    /// Inference-mode logits for a batch of images, shape B × classes.
    pub fn logits(&self, images: &[ImageArray]) -> Result<Tensor, ModelError> {
        let xs = images_to_tensor(images, self.kind())?.to_device(self.device());
        Ok(tch::no_grad(|| self.forward_t(&xs, false)))
    }

    pub fn save_weights(&self, path: &Path) -> Result<(), ModelError> {
        if path.extension().and_then(|e| e.to_str()) != Some("safetensors") {
            return Err(ModelError::InvalidSpec(format!(
                "{}: weights files must use the .safetensors extension",
                path.display()
            )));
        }
        Ok(self.vs.save(path)?)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<(), ModelError> {
        Ok(self.vs.load(path)?)
    }
}

/// Stack normalized images into a B × 3 × H × W tensor.
pub fn images_to_tensor(images: &[ImageArray], kind: Kind) -> Result<Tensor, ModelError> {
    let first = images
        .first()
        .ok_or_else(|| ModelError::ShapeMismatch("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if (img.height, img.width) != (h, w) || img.data.len() != 3 * (h * w) as usize {
            return Err(ModelError::ShapeMismatch(format!(
                "image of {}x{} in a batch of {h}x{w}",
                img.height, img.width
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_slice(&data)
        .view([images.len() as i64, 3, h as i64, w as i64])
        .to_kind(kind))
}

/// Exact number of trainable scalars.
pub fn parameter_count(handle: &ModelHandle) -> i64 {
    handle
        .vs
        .trainable_variables()
        .iter()
        .map(|t| t.numel() as i64)
        .sum()
}

/// Serialize the weights to `path` and report the file size in MB (10^6 bytes).
pub fn serialized_size_mb(handle: &ModelHandle, path: &Path) -> Result<f64, ModelError> {
    handle.save_weights(path)?;
    let bytes = std::fs::metadata(path)
        .map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .len();
    Ok(bytes as f64 / 1e6)
}
