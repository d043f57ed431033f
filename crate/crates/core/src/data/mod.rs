//! Datasets: IDX (MNIST-style) files, CIFAR-10 binary batches and seeded
//! synthetic Gaussian blobs.

mod cifar;
mod idx;
mod synthetic;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, InputShape};

pub use cifar::{load_cifar_batches, load_cifar_dir, CIFAR10_MEAN, CIFAR10_STD};
pub use idx::{load_idx, load_idx_with, load_mnist_dir, MNIST_MEAN, MNIST_STD};
pub use synthetic::{synthetic_blobs, SyntheticSplit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Per-channel affine normalization `x' = (x - mean) / std` applied to raw
/// values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    split: Split,
    shape: InputShape,
    classes: usize,
    inputs: Vec<f32>,
    labels: Vec<u32>,
    normalization: Normalization,
    digest: u32,
}

impl Dataset {
    /// Builds a dataset from already-normalized inputs.
    pub fn new(
        split: Split,
        shape: InputShape,
        classes: usize,
        inputs: Vec<f32>,
        labels: Vec<u32>,
        normalization: Normalization,
        digest: u32,
    ) -> Result<Self> {
        if inputs.len() != labels.len() * shape.len() {
            return Err(Error::Shape(format!(
                "{} labels need {} input values, got {}",
                labels.len(),
                labels.len() * shape.len(),
                inputs.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Label { label, classes });
        }
        if normalization.mean.len() != shape.channels()
            || normalization.std.len() != shape.channels()
        {
            return Err(Error::Shape(
                "normalization must have one entry per channel".into(),
            ));
        }
        Ok(Dataset {
            split,
            shape,
            classes,
            inputs,
            labels,
            normalization,
            digest,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// CRC32 of the raw payload the dataset was built from.
    pub fn digest(&self) -> u32 {
        self.digest
    }

    pub fn example(&self, i: usize) -> &[f32] {
        let d = self.shape.len();
        &self.inputs[i * d..(i + 1) * d]
    }

    /// Consecutive batches of at most `size` examples, in dataset order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Batch<'_>> {
        let d = self.shape.len();
        let size = size.max(1);
        self.labels
            .chunks(size)
            .zip(self.inputs.chunks(size * d))
            .map(move |(l, x)| Batch::new(x, l, d).expect("chunks are consistent"))
    }

    /// Copies the examples at `indices` into an owned buffer.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<u32>) {
        let d = self.shape.len();
        let mut x = Vec::with_capacity(indices.len() * d);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.example(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    /// New dataset with only the examples at `indices` (in that order).
    /// The digest is recomputed from the selected inputs and labels.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (x, y) = self.gather(indices);
        let mut h = crc32fast::Hasher::new();
        h.update(&self.digest.to_le_bytes());
        for &i in indices {
            h.update(&(i as u64).to_le_bytes());
        }
        Dataset::new(
            self.split,
            self.shape,
            self.classes,
            x,
            y,
            self.normalization.clone(),
            h.finalize(),
        )
    }

    /// Seeded selection of at most `k` examples per class, returned in
    /// ascending index order.
    pub fn subsample_per_class(&self, k: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = Vec::new();
        for c in 0..self.classes as u32 {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            idx.shuffle(&mut rng);
            idx.truncate(k);
            chosen.extend(idx);
        }
        chosen.sort_unstable();
        self.subset(&chosen)
    }

    /// Undoes the normalization, giving raw values in `[0, 1]`.
    pub fn denormalized(&self) -> Vec<f32> {
        let (ch, plane) = channel_layout(self.shape);
        let mut out = self.inputs.clone();
        for ex in out.chunks_exact_mut(ch * plane) {
            for (c, chan) in ex.chunks_exact_mut(plane).enumerate() {
                let (m, s) = (self.normalization.mean[c], self.normalization.std[c]);
                for v in chan {
                    *v = *v * s + m;
                }
            }
        }
        out
    }
}

fn channel_layout(shape: InputShape) -> (usize, usize) {
    match shape {
        InputShape::Flat(d) => (1, d),
        InputShape::Image {
            height,
            width,
            channels,
        } => (channels, height * width),
    }
}

/// Raw bytes (channel-major per example) to normalized floats.
pub(crate) fn normalize_bytes(raw: &[u8], shape: InputShape, norm: &Normalization) -> Vec<f32> {
    let (ch, plane) = channel_layout(shape);
    let mut out = Vec::with_capacity(raw.len());
    for ex in raw.chunks_exact(ch * plane) {
        for (c, chan) in ex.chunks_exact(plane).enumerate() {
            let (m, s) = (norm.mean[c], norm.std[c]);
            out.extend(chan.iter().map(|&b| (b as f32 / 255.0 - m) / s));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let shape = InputShape::image(1, 2, 2);
        let norm = Normalization {
            mean: vec![0.5, 0.25],
            std: vec![0.5, 2.0],
        };
        let raw: Vec<u8> = vec![0, 255, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100];
        let x = normalize_bytes(&raw, shape, &norm);
        Dataset::new(Split::Train, shape, 3, x, vec![0, 1, 2], norm, 0).unwrap()
    }

    #[test]
    fn normalization_inverts() {
        let d = tiny();
        let raw: Vec<f32> = [0u8, 255, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        for (a, b) in d.denormalized().iter().zip(&raw) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batches_cover_dataset_in_order() {
        let d = tiny();
        let labels: Vec<u32> = d.batches(2).flat_map(|b| b.labels().to_vec()).collect();
        assert_eq!(labels, vec![0, 1, 2]);
        assert_eq!(d.batches(2).count(), 2);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let shape = InputShape::Flat(1);
        let r = Dataset::new(
            Split::Test,
            shape,
            2,
            vec![0.0],
            vec![2],
            Normalization::identity(1),
            0,
        );
        assert!(matches!(
            r,
            Err(Error::Label {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn subsample_is_seeded_and_balanced() {
        let shape = InputShape::Flat(1);
        let labels: Vec<u32> = (0..40).map(|i| i % 4).collect();
        let x: Vec<f32> = (0..40).map(|i| i as f32).collect();
        let d = Dataset::new(
            Split::Train,
            shape,
            4,
            x,
            labels,
            Normalization::identity(1),
            7,
        )
        .unwrap();
        let a = d.subsample_per_class(3, 11).unwrap();
        let b = d.subsample_per_class(3, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        for c in 0..4 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 3);
        }
        assert_ne!(a.digest(), d.subsample_per_class(3, 12).unwrap().digest());
    }
}
