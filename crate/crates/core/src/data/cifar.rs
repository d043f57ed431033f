//! CIFAR-10 binary batches: each record is one label byte followed by
//! 3072 pixel bytes (1024 red, 1024 green, 1024 blue; row-major 32x32).

use std::path::{Path, PathBuf};

use super::{normalize_bytes, Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::nn::InputShape;

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
const RECORD: usize = 1 + PIXELS;

pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Concatenates the records of several batch files. The digest is the
/// CRC32 of all record bytes in file order.
pub fn load_cifar_batches(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut h = crc32fast::Hasher::new();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(Error::Format {
                path: path.clone(),
                msg: format!(
                    "length {} is not a positive multiple of {RECORD}",
                    bytes.len()
                ),
            });
        }
        h.update(&bytes);
        for rec in bytes.chunks_exact(RECORD) {
            if rec[0] > 9 {
                return Err(Error::Format {
                    path: path.clone(),
                    msg: format!("label byte {} out of range", rec[0]),
                });
            }
            labels.push(rec[0] as u32);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    let shape = InputShape::image(SIDE, SIDE, 3);
    let norm = Normalization {
        mean: CIFAR10_MEAN.to_vec(),
        std: CIFAR10_STD.to_vec(),
    };
    let inputs = normalize_bytes(&pixels, shape, &norm);
    Dataset::new(split, shape, 10, inputs, labels, norm, h.finalize())
}

/// Standard file names of the binary distribution (`cifar-10-batches-bin`).
pub fn load_cifar_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    load_cifar_batches(&files, split)
}
