use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::BagPrediction;
use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionArtifacts {
    pub csv: PathBuf,
    pub pgm: PathBuf,
}

/// `h,w,weight` header, then one row per cell in row-major order.
pub fn attention_csv(weights: &Tensor) -> String {
    let (h, w) = grid_dims(weights);
    let mut out = String::from("h,w,weight\n");
    for i in 0..h {
        for j in 0..w {
            let _ = writeln!(out, "{i},{j},{}", weights.data()[i * w + j]);
        }
    }
    out
}

/// Binary PGM (P5) of the weight grid upscaled by nearest neighbour to
/// `size`×`size` and min-max scaled to 0..=255. A flat grid renders as 128.
pub fn attention_pgm(weights: &Tensor, size: usize) -> Vec<u8> {
    let (h, w) = grid_dims(weights);
    let data = weights.data();
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let level = |v: f64| -> u8 {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    };
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    out.reserve(size * size);
    for y in 0..size {
        let i = y * h / size;
        for x in 0..size {
            let j = x * w / size;
            out.push(level(data[i * w + j]));
        }
    }
    out
}

fn grid_dims(weights: &Tensor) -> (usize, usize) {
    match weights.shape() {
        [h, w] => (*h, *w),
        [n] => (1, *n),
        s => (s[0], s[1..].iter().product()),
    }
}

/// Writes `<base>.csv` and `<base>.pgm` for a bag's attention grid.
pub fn export_attention_map(pred: &BagPrediction, size: usize, base: &Path) -> Result<AttentionArtifacts> {
    let weights = pred.attention_weights.as_ref().ok_or_else(|| {
        Error::InvalidArgument("prediction carries no attention weights".into())
    })?;
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let csv = base.with_extension("csv");
    let pgm = base.with_extension("pgm");
    fs::write(&csv, attention_csv(weights)).map_err(io_err(&csv))?;
    fs::write(&pgm, attention_pgm(weights, size)).map_err(io_err(&pgm))?;
    Ok(AttentionArtifacts { csv, pgm })
}
