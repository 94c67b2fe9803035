//! Synthetic scenes with one class-defining glyph at a random position on a
//! noisy, cluttered background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Item, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GLYPHS: [&str; 8] = ["square", "cross", "diagonal", "ring", "t", "l", "checker", "stripes"];

/// Glyph patterns are drawn on an 8×8 cell grid.
const CELLS: usize = 8;

fn glyph_cell(glyph: usize, r: usize, c: usize) -> bool {
    let (r, c) = (r as i32, c as i32);
    match glyph {
        0 => r == 0 || r == 7 || c == 0 || c == 7,
        1 => (3..=4).contains(&r) || (3..=4).contains(&c),
        2 => (r - c).abs() <= 1,
        3 => {
            let d = ((r as f64 - 3.5).powi(2) + (c as f64 - 3.5).powi(2)).sqrt();
            (2.4..=3.9).contains(&d)
        }
        4 => r <= 1 || (3..=4).contains(&c),
        5 => c <= 1 || r >= 6,
        6 => (r / 2 + c / 2) % 2 == 0,
        _ => c % 2 == 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Number of clutter strokes per image.
    pub clutter: usize,
    /// Glyph side as a fraction of the image side.
    pub glyph_fraction: f64,
    /// Range of the absolute glyph/background intensity difference.
    pub contrast: (f64, f64),
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            noise: 0.08,
            clutter: 6,
            glyph_fraction: 0.25,
            contrast: (0.25, 0.45),
        }
    }
}

/// Top-left corner and side of the glyph in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlyphBox {
    pub y: usize,
    pub x: usize,
    pub side: usize,
}

/// Generated set plus where each item's glyph was drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSet {
    pub dataset: LabeledDataset,
    pub boxes: Vec<GlyphBox>,
}

pub fn synth_generate(n_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<LabeledDataset> {
    Ok(synth_generate_with(n_classes, per_class, image_size, seed, &SynthParams::default())?.dataset)
}

pub fn synth_generate_with(
    n_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<SynthSet> {
    if n_classes == 0 || n_classes > GLYPHS.len() {
        return Err(Error::InvalidArgument(format!(
            "classes must be between 1 and {}, got {n_classes}",
            GLYPHS.len()
        )));
    }
    if image_size == 0 || !image_size.is_multiple_of(32) {
        return Err(Error::InvalidArgument(format!(
            "image size {image_size} must be a positive multiple of 32"
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    if !(params.noise >= 0.0 && params.glyph_fraction > 0.0 && params.glyph_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("invalid synthetic parameters {params:?}")));
    }
    let names: Vec<String> = (0..n_classes).map(|c| format!("{c}_{}", GLYPHS[c])).collect();
    let mut items = Vec::with_capacity(n_classes * per_class);
    let mut boxes = Vec::with_capacity(n_classes * per_class);
    for label in 0..n_classes {
        for k in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((label * per_class + k) as u64);
            let (image, glyph) = draw(label, image_size, params, &mut rng);
            items.push(Item {
                image,
                label,
                source_id: format!("{}_{k:04}", names[label]),
            });
            boxes.push(glyph);
        }
    }
    Ok(SynthSet {
        dataset: LabeledDataset::new(names, items)?,
        boxes,
    })
}

fn draw(glyph: usize, size: usize, params: &SynthParams, rng: &mut ChaCha8Rng) -> (Tensor, GlyphBox) {
    let plane = size * size;
    let mut img = vec![0.0; 3 * plane];
    let base: [f64; 3] = {
        let gray = rng.gen_range(0.35..0.65);
        [0, 1, 2].map(|_| gray + rng.gen_range(-0.05..0.05))
    };
    for c in 0..3 {
        img[c * plane..(c + 1) * plane].fill(base[c]);
    }
    let side = ((size as f64 * params.glyph_fraction).round() as usize).clamp(CELLS, size);
    let ink = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        let delta = rng.gen_range(params.contrast.0..=params.contrast.1);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        base.map(|b| b + sign * delta)
    };
    let paint = |img: &mut Vec<f64>, y: usize, x: usize, color: [f64; 3]| {
        for c in 0..3 {
            img[c * plane + y * size + x] = color[c];
        }
    };

    // Clutter: straight strokes with the same thickness and inks as glyph strokes.
    let stroke = (side / CELLS).max(1);
    for _ in 0..params.clutter {
        let color = ink(rng);
        let len = rng.gen_range(side / 2..=side);
        let horizontal = rng.gen_bool(0.5);
        let (h, w) = if horizontal { (stroke, len) } else { (len, stroke) };
        let y0 = rng.gen_range(0..=size - h);
        let x0 = rng.gen_range(0..=size - w);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                paint(&mut img, y, x, color);
            }
        }
    }

    let color = ink(rng);
    let gy = rng.gen_range(0..=size - side);
    let gx = rng.gen_range(0..=size - side);
    for y in 0..side {
        for x in 0..side {
            if glyph_cell(glyph, y * CELLS / side, x * CELLS / side) {
                paint(&mut img, gy + y, gx + x, color);
            }
        }
    }

    let noise = Normal::new(0.0, params.noise).expect("finite noise level");
    for v in img.iter_mut() {
        let n = if params.noise > 0.0 { noise.sample(rng) } else { 0.0 };
        // Stored at 8-bit levels so a PPM round trip is lossless.
        *v = ((*v + n).clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    (
        Tensor::from_parts(vec![3, size, size], img),
        GlyphBox { y: gy, x: gx, side },
    )
}

#[cfg(test)]
pub(crate) fn pattern(glyph: usize) -> Vec<bool> {
    (0..CELLS * CELLS).map(|i| glyph_cell(glyph, i / CELLS, i % CELLS)).collect()
}
