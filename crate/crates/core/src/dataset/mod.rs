//! Balanced sampling, image fetching and augmentation.

mod augment;
mod fetch;
mod sampling;
pub mod synthetic;

use std::path::PathBuf;

use thiserror::Error;

use crate::catalog::Label;

pub use augment::{
    augment, augment_resized, center_crop_normalized, eval_transform, resize, sample_rng,
    AugmentTrace, AugmentationPolicy, ImageArray, ResizeMode,
};
pub use fetch::{fetch_all, fetch_image, resolve_url, ImageCache, CACHE_ENV_VAR};
pub use sampling::{
    draw_balanced, draw_balanced_with_reserve, positives_for, read_samples, split, write_samples,
    LabeledSample, Reserve, SampleDraw, SplitSpec,
};

/// Decoded 8-bit RGB image.
pub type RgbImage = image::RgbImage;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("insufficient {label} samples: need {required}, have {available}")]
    InsufficientClass {
        label: &'static str,
        required: usize,
        available: usize,
    },
    #[error("invalid draw parameters: {0}")]
    InvalidDraw(String),
    #[error("split would be degenerate: {train} train / {test} test samples")]
    DegenerateSplit { train: usize, test: usize },
    #[error("augmentation policy: {0}")]
    PolicyError(String),
    #[error("fetch {url}: {status}")]
    FetchError { url: String, status: String },
    #[error("decode {url}: {reason}")]
    DecodeError { url: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DatasetError {
    /// Errors that only affect one sample and should not abort a batch.
    pub fn is_per_sample(&self) -> bool {
        matches!(self, DatasetError::FetchError { .. } | DatasetError::DecodeError { .. })
    }
}

pub(crate) fn label_name(label: Label) -> &'static str {
    match label {
        Label::Flood => "positive (flood)",
        Label::NonFlood => "negative (non-flood)",
    }
}
