//! Labeled image sets: directory ingestion, stratified splits and the
//! synthetic glyph generator.

mod image_io;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use image_io::{load_image, load_image_dir, resize_bilinear, save_ppm, write_dataset_dir, IMAGE_EXTENSIONS};
pub use synth::{synth_generate, synth_generate_with, GlyphBox, SynthParams, SynthSet, GLYPHS};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    /// [3, H, W] with values in [0, 1].
    pub image: Tensor,
    pub label: usize,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub class_names: Vec<String>,
    pub items: Vec<Item>,
}

impl LabeledDataset {
    pub fn new(class_names: Vec<String>, items: Vec<Item>) -> Result<Self> {
        let ds = Self { class_names, items };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        let dims = self.items.first().map(|i| i.image.shape().to_vec());
        for item in &self.items {
            if item.label >= self.class_names.len() {
                return Err(Error::LabelOutOfRange {
                    label: item.label,
                    classes: self.class_names.len(),
                });
            }
            let shape = item.image.shape();
            if shape.len() != 3 || shape[0] != 3 || Some(shape) != dims.as_deref() {
                return Err(Error::Dataset(format!(
                    "item '{}' has shape {:?}, expected {:?}",
                    item.source_id,
                    shape,
                    dims.unwrap_or_default()
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Side length of the (square) images, if any.
    pub fn image_size(&self) -> Option<usize> {
        self.items.first().map(|i| i.image.shape()[2])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for item in &self.items {
            counts[item.label] += 1;
        }
        counts
    }

    /// Stacks the images at `indices` into [N, 3, H, W].
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.items[i].image).collect();
        let labels = indices.iter().map(|&i| self.items[i].label).collect();
        (Tensor::stack(&images).expect("dataset images share one shape"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            class_names: self.class_names.clone(),
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }
}

/// Per class: seeded shuffle, then the first floor(ratio·n) items go to
/// train and the rest to test. Both halves keep the original item order.
pub fn stratified_split(ds: &LabeledDataset, train_ratio: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("train_ratio {train_ratio} must lie in (0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, item) in ds.items.iter().enumerate() {
        by_class[item.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Dataset(format!(
                "class '{}' has {} item(s); a split needs at least 2",
                ds.class_names[c],
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((train_ratio * idx.len() as f64).floor() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[cfg(test)]
mod tests;
