//! Geometric and photometric transforms applied before images reach a model.
//!
//! Training order: resize, random rotation, random crop, horizontal flip,
//! per-channel normalization. Evaluation replaces the random steps with a
//! center crop.

use image::imageops::{self, FilterType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetError, RgbImage};

/// Which side of the image is scaled to `resize_target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResizeMode {
    #[default]
    ShorterSide,
    Width,
}

impl std::str::FromStr for ResizeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shorter-side" | "shorter" => Ok(ResizeMode::ShorterSide),
            "width" => Ok(ResizeMode::Width),
            other => Err(format!("unknown resize mode {other:?} (expected shorter-side or width)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub resize_target: u32,
    pub resize_mode: ResizeMode,
    pub max_rotation_deg: f32,
    pub crop_size: u32,
    pub hflip_prob: f64,
    pub normalize_mean: [f32; 3],
    pub normalize_std: [f32; 3],
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            resize_target: 256,
            resize_mode: ResizeMode::ShorterSide,
            max_rotation_deg: 10.0,
            crop_size: 250,
            hflip_prob: 0.5,
            normalize_mean: [0.485, 0.456, 0.406],
            normalize_std: [0.229, 0.224, 0.225],
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |msg: String| Err(DatasetError::PolicyError(msg));
        if self.crop_size == 0 || self.resize_target == 0 {
            return fail("crop_size and resize_target must be positive".into());
        }
        if self.crop_size > self.resize_target {
            return fail(format!(
                "crop_size {} exceeds resize_target {}",
                self.crop_size, self.resize_target
            ));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return fail(format!("hflip_prob {} outside [0, 1]", self.hflip_prob));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            return fail(format!("max_rotation_deg {} must be >= 0", self.max_rotation_deg));
        }
        if self.normalize_std.iter().any(|s| !(*s > 0.0)) {
            return fail("normalize_std entries must be positive".into());
        }
        Ok(())
    }
}

/// Normalized image, channel-major (3 × height × width).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    pub height: u32,
    pub width: u32,
    pub data: Vec<f32>,
}

impl ImageArray {
    pub const CHANNELS: usize = 3;

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = (self.height * self.width) as usize;
        &self.data[c * plane..(c + 1) * plane]
    }
}

/// Random choices made by one [`augment`] call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentTrace {
    pub angle_deg: f32,
    pub crop_x: u32,
    pub crop_y: u32,
    pub flipped: bool,
}

/// Per-sample augmentation stream derived from the global seed, the image id
/// and the epoch, independent of loader ordering.
pub fn sample_rng(seed: u64, image_id: &str, epoch: usize) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((epoch as u64).to_le_bytes());
    hasher.update(image_id.as_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

fn resized_dims(height: u32, width: u32, policy: &AugmentationPolicy) -> (u32, u32) {
    let target = policy.resize_target as f64;
    let scale = |len: u32, by: u32| ((len as f64 * target / by as f64).round() as u32).max(1);
    match policy.resize_mode {
        ResizeMode::ShorterSide if height <= width => (policy.resize_target, scale(width, height)),
        ResizeMode::ShorterSide => (scale(height, width), policy.resize_target),
        ResizeMode::Width => (scale(height, width), policy.resize_target),
    }
}

/// Scale according to the policy's resize mode, preserving aspect ratio.
pub fn resize(img: &RgbImage, policy: &AugmentationPolicy) -> Result<RgbImage, DatasetError> {
    let (h, w) = (img.height(), img.width());
    if h == 0 || w == 0 {
        return Err(DatasetError::PolicyError("image has zero size".into()));
    }
    let (nh, nw) = resized_dims(h, w, policy);
    if (nh, nw) == (h, w) {
        return Ok(img.clone());
    }
    Ok(imageops::resize(img, nw, nh, FilterType::Triangle))
}

/// Rotate about the image center by `angle_deg` (counter-clockwise), nearest
/// neighbour sampling, exposed corners filled with black.
fn rotate(img: &RgbImage, angle_deg: f32) -> RgbImage {
    if angle_deg == 0.0 {
        return img.clone();
    }
    let (w, h) = img.dimensions();
    let (sin, cos) = (angle_deg as f64).to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        let dy = y as f64 + 0.5 - cy;
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let sx = (cos * dx - sin * dy + cx).floor();
            let sy = (sin * dx + cos * dy + cy).floor();
            if sx >= 0.0 && sy >= 0.0 && (sx as u32) < w && (sy as u32) < h {
                out.put_pixel(x, y, *img.get_pixel(sx as u32, sy as u32));
            }
        }
    }
    out
}

fn check_crop(img: &RgbImage, policy: &AugmentationPolicy) -> Result<(), DatasetError> {
    let min_side = img.width().min(img.height());
    if policy.crop_size > min_side {
        return Err(DatasetError::PolicyError(format!(
            "crop_size {} exceeds resized image side {}",
            policy.crop_size, min_side
        )));
    }
    Ok(())
}

fn crop_normalize(
    img: &RgbImage,
    x0: u32,
    y0: u32,
    flip: bool,
    policy: &AugmentationPolicy,
) -> ImageArray {
    let size = policy.crop_size;
    let plane = (size * size) as usize;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let sx = if flip { x0 + size - 1 - x } else { x0 + x };
            let px = img.get_pixel(sx, y0 + y).0;
            let at = (y * size + x) as usize;
            for c in 0..3 {
                data[c * plane + at] =
                    (px[c] as f32 / 255.0 - policy.normalize_mean[c]) / policy.normalize_std[c];
            }
        }
    }
    ImageArray {
        height: size,
        width: size,
        data,
    }
}

/// Random rotation, crop and flip of an already resized image.
pub fn augment_resized<R: Rng>(
    resized: &RgbImage,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<(ImageArray, AugmentTrace), DatasetError> {
    policy.validate()?;
    check_crop(resized, policy)?;
    let max = policy.max_rotation_deg;
    let angle_deg = if max > 0.0 { rng.gen_range(-max..=max) } else { 0.0 };
    let rotated = rotate(resized, angle_deg);
    let crop_x = rng.gen_range(0..=rotated.width() - policy.crop_size);
    let crop_y = rng.gen_range(0..=rotated.height() - policy.crop_size);
    let flipped = rng.gen_bool(policy.hflip_prob);
    let out = crop_normalize(&rotated, crop_x, crop_y, flipped, policy);
    Ok((
        out,
        AugmentTrace {
            angle_deg,
            crop_x,
            crop_y,
            flipped,
        },
    ))
}

/// Full training transform.
pub fn augment<R: Rng>(
    img: &RgbImage,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<(ImageArray, AugmentTrace), DatasetError> {
    policy.validate()?;
    augment_resized(&resize(img, policy)?, policy, rng)
}

/// Deterministic center crop of an already resized image.
pub fn center_crop_normalized(resized: &RgbImage, policy: &AugmentationPolicy) -> Result<ImageArray, DatasetError> {
    policy.validate()?;
    check_crop(resized, policy)?;
    let x0 = (resized.width() - policy.crop_size) / 2;
    let y0 = (resized.height() - policy.crop_size) / 2;
    Ok(crop_normalize(resized, x0, y0, false, policy))
}

/// Deterministic evaluation transform: resize, center crop, normalize.
pub fn eval_transform(img: &RgbImage, policy: &AugmentationPolicy) -> Result<ImageArray, DatasetError> {
    policy.validate()?;
    center_crop_normalized(&resize(img, policy)?, policy)
}
