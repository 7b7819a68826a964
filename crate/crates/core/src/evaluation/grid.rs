//! Montage of seeded-random test predictions with correctness borders.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::Rgb;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{predict, EvalError, FloodClassifier, Prediction};
use crate::catalog::Label;
use crate::dataset::{fetch_image, AugmentationPolicy, ImageCache, LabeledSample, RgbImage};

pub const GRID_ROWS: usize = 3;
pub const GRID_COLS: usize = 5;

const THUMB: u32 = 120;
const BORDER: u32 = 5;
const CAPTION: u32 = 18;
const GAP: u32 = 6;
const GREEN: Rgb<u8> = Rgb([20, 170, 60]);
const RED: Rgb<u8> = Rgb([210, 30, 30]);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub image_id: String,
    pub url: String,
    pub predicted: Label,
    pub truth: Label,
    pub confidence: f64,
    pub correct: bool,
}

/// Cell annotations; this is what the JSON selection manifest holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionGrid {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<GridCell>,
    #[serde(skip)]
    pub image: Option<RgbImage>,
}

impl PredictionGrid {
    pub fn shape(k: usize) -> (usize, usize) {
        let cols = k.min(GRID_COLS);
        (k.div_ceil(GRID_COLS), cols)
    }

    /// Writes the montage PNG and `<png stem>.json` next to it.
    pub fn write(&self, png: &Path) -> Result<PathBuf, EvalError> {
        if let Some(img) = &self.image {
            img.save(png).map_err(|e| EvalError::Encode {
                path: png.to_path_buf(),
                reason: e.to_string(),
            })?;
        }
        let manifest = png.with_extension("json");
        let json = serde_json::to_string_pretty(self).expect("grid manifest serializes");
        fs::write(&manifest, json + "\n").map_err(|source| EvalError::Io {
            path: manifest.clone(),
            source,
        })?;
        Ok(manifest)
    }
}

/// Pick `k` test samples with `seed`, predict them and draw a montage of at
/// most 3 × 5 cells. Green borders mark correct predictions, red wrong ones.
pub fn render_grid<C: FloodClassifier + ?Sized>(
    classifier: &C,
    test_samples: &[LabeledSample],
    k: usize,
    seed: u64,
    cache: &ImageCache,
    policy: &AugmentationPolicy,
) -> Result<PredictionGrid, EvalError> {
    if k == 0 || k > GRID_ROWS * GRID_COLS || test_samples.len() < k {
        return Err(EvalError::InsufficientSamples {
            required: k.clamp(1, GRID_ROWS * GRID_COLS),
            available: test_samples.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<LabeledSample> = test_samples.choose_multiple(&mut rng, k).cloned().collect();
    let outcome = predict(classifier, &chosen, cache, policy, 4)?;
    if !outcome.skipped.is_empty() {
        return Err(EvalError::InsufficientSamples {
            required: k,
            available: k - outcome.skipped.len(),
        });
    }

    let (rows, cols) = PredictionGrid::shape(k);
    let cell_w = THUMB + 2 * BORDER;
    let cell_h = THUMB + 2 * BORDER + CAPTION;
    let width = cols as u32 * cell_w + (cols as u32 + 1) * GAP;
    let height = rows as u32 * cell_h + (rows as u32 + 1) * GAP;
    let mut canvas = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let mut cells = Vec::with_capacity(k);

    for (i, p) in outcome.predictions.iter().enumerate() {
        let (row, col) = (i / GRID_COLS, i % GRID_COLS);
        let x0 = GAP + col as u32 * (cell_w + GAP);
        let y0 = GAP + row as u32 * (cell_h + GAP);
        let Prediction { label, confidence } = p.prediction;
        let correct = label == p.sample.label;
        let colour = if correct { GREEN } else { RED };
        fill(&mut canvas, x0, y0, cell_w, THUMB + 2 * BORDER, colour);
        let img = fetch_image(&p.sample, cache)?;
        let thumb = imageops::resize(&img, THUMB, THUMB, FilterType::Triangle);
        imageops::replace(&mut canvas, &thumb, (x0 + BORDER) as i64, (y0 + BORDER) as i64);
        let caption = format!("P:{} T:{}", label.as_u8(), p.sample.label.as_u8());
        draw_text(&mut canvas, x0 + 4, y0 + THUMB + 2 * BORDER + 3, &caption, 2, Rgb([0, 0, 0]));
        cells.push(GridCell {
            row,
            col,
            image_id: p.sample.image_id.clone(),
            url: p.sample.url.clone(),
            predicted: label,
            truth: p.sample.label,
            confidence,
            correct,
        });
    }
    Ok(PredictionGrid {
        seed,
        rows,
        cols,
        cells,
        image: Some(canvas),
    })
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, colour: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, colour);
        }
    }
}

/// 3×5 bitmap glyphs, one row per u8 (low three bits, MSB on the left).
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        ':' => [0b000, 0b010, 0b000, 0b010, 0b000],
        _ => [0; 5],
    }
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str, scale: u32, colour: Rgb<u8>) {
    for (i, c) in text.chars().enumerate() {
        let gx = x0 + i as u32 * 4 * scale;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    fill(img, gx + col * scale, y0 + row as u32 * scale, scale, scale, colour);
                }
            }
        }
    }
}
