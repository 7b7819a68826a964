//! Synthetic flood / non-flood imagery and annotation fixtures.
//!
//! Flood images are dominated by blue-grey water tones, non-flood images by
//! earth and vegetation tones. Both carry pixel noise and random patches so
//! the classes overlap locally but stay separable by colour statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::Rgb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, RgbImage};
use crate::catalog::Label;

const WATER: [f32; 3] = [70.0, 105.0, 150.0];
const GROUND: [f32; 3] = [135.0, 120.0, 75.0];
const PATCH_TONES: [[f32; 3]; 3] = [[200.0, 200.0, 195.0], [60.0, 60.0, 60.0], [95.0, 140.0, 70.0]];

pub fn synthetic_image(label: Label, seed: u64, height: u32, width: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = match label {
        Label::Flood => WATER,
        Label::NonFlood => GROUND,
    };
    let mut img = RgbImage::from_fn(width, height, |_, _| {
        let mut px = [0u8; 3];
        for (c, v) in px.iter_mut().enumerate() {
            *v = (base[c] + rng.gen_range(-35.0..35.0)).clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    });
    // roofs, roads and trees appear in both classes
    let patches = rng.gen_range(1..4);
    for _ in 0..patches {
        let tone = PATCH_TONES[rng.gen_range(0..PATCH_TONES.len())];
        let pw = rng.gen_range(1..=(width / 4).max(1));
        let ph = rng.gen_range(1..=(height / 4).max(1));
        let x0 = rng.gen_range(0..width.saturating_sub(pw).max(1));
        let y0 = rng.gen_range(0..height.saturating_sub(ph).max(1));
        for y in y0..(y0 + ph).min(height) {
            for x in x0..(x0 + pw).min(width) {
                let mut px = [0u8; 3];
                for (c, v) in px.iter_mut().enumerate() {
                    *v = (tone[c] + rng.gen_range(-15.0..15.0)).clamp(0.0, 255.0) as u8;
                }
                img.put_pixel(x, y, Rgb(px));
            }
        }
    }
    img
}

/// Paths of a generated annotation fixture.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub labels_csv: PathBuf,
    pub images_dir: PathBuf,
    pub flood: usize,
    pub nonflood: usize,
}

/// Write `flood + nonflood` PNG images under `dir/images` and a LADI-style
/// annotation table `dir/labels.csv` referring to them. The table also holds
/// one exact duplicate row, one machine annotation and infrastructure rows
/// labelled "none" so that every cleaning rule has something to do.
pub fn write_fixture(
    dir: &Path,
    flood: usize,
    nonflood: usize,
    size: (u32, u32),
    seed: u64,
) -> Result<Fixture, DatasetError> {
    let io = |path: &Path, source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| io(&images_dir, e))?;
    let mut csv = String::from("image_id,url,category,label,annotator\n");
    let damage_nonflood = ["rubble", "fire", "landslide", "road washout"];
    for i in 0..flood + nonflood {
        let label = if i < flood { Label::Flood } else { Label::NonFlood };
        let id = format!("syn{i:05}");
        let path = images_dir.join(format!("{id}.png"));
        synthetic_image(label, seed.wrapping_mul(1_000_003).wrapping_add(i as u64), size.1, size.0)
            .save(&path)
            .map_err(|e| DatasetError::DecodeError {
                url: path.display().to_string(),
                reason: e.to_string(),
            })?;
        let url = path.display().to_string();
        let damage = match label {
            Label::Flood if i % 3 == 0 => "Flood/Water",
            Label::Flood => "flood/water",
            Label::NonFlood => damage_nonflood[i % damage_nonflood.len()],
        };
        let _ = writeln!(csv, "{id},{url},damage,{damage},human");
        if i % 2 == 0 {
            let _ = writeln!(csv, "{id},{url},infrastructure,none,human");
        } else {
            let _ = writeln!(csv, "{id},{url},infrastructure,buildings,human");
        }
        if i == 0 {
            let _ = writeln!(csv, "{id},{url},damage,{damage},human");
            let _ = writeln!(csv, "{id},{url},damage,flood/water,machine");
        }
    }
    let labels_csv = dir.join("labels.csv");
    fs::write(&labels_csv, csv).map_err(|e| io(&labels_csv, e))?;
    Ok(Fixture {
        labels_csv,
        images_dir,
        flood,
        nonflood,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_mean(img: &RgbImage, c: usize) -> f64 {
        img.pixels().map(|p| p.0[c] as f64).sum::<f64>() / (img.width() * img.height()) as f64
    }

    #[test]
    fn classes_differ_in_blue_minus_red() {
        for seed in 0..20 {
            let f = synthetic_image(Label::Flood, seed, 32, 32);
            let n = synthetic_image(Label::NonFlood, seed, 32, 32);
            let score = |img: &RgbImage| channel_mean(img, 2) - channel_mean(img, 0);
            assert!(score(&f) > score(&n), "seed {seed}");
        }
    }

    #[test]
    fn images_are_seed_deterministic() {
        assert_eq!(
            synthetic_image(Label::Flood, 3, 16, 20),
            synthetic_image(Label::Flood, 3, 16, 20)
        );
    }
}
