//! IDX file format (big-endian header, unsigned-byte payload).

use std::path::Path;

use super::{normalize_bytes, Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::nn::InputShape;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// MNIST training-set pixel statistics after scaling to `[0, 1]`.
pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX file: returns (dimension sizes, payload).
fn parse_idx<'a>(
    bytes: &'a [u8],
    expected_magic: u32,
    path: &Path,
) -> Result<(Vec<usize>, &'a [u8])> {
    let fmt_err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let magic =
        be_u32(bytes, 0).ok_or_else(|| fmt_err("file shorter than the IDX header".into()))?;
    if magic != expected_magic {
        return Err(fmt_err(format!(
            "bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let d = be_u32(bytes, 4 + 4 * i).ok_or_else(|| fmt_err("truncated IDX header".into()))?;
        dims.push(d as usize);
    }
    let header = 4 + 4 * ndim;
    let want: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != want {
        return Err(fmt_err(format!(
            "payload length {} does not match header dimensions {:?} ({} bytes)",
            payload.len(),
            dims,
            want
        )));
    }
    Ok((dims, payload))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label pair with MNIST normalization constants.
pub fn load_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset> {
    load_idx_with(
        images,
        labels,
        split,
        10,
        Normalization {
            mean: vec![MNIST_MEAN],
            std: vec![MNIST_STD],
        },
    )
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]` and then
/// normalized with `norm`. The digest is the CRC32 of the image payload
/// followed by the label payload.
pub fn load_idx_with(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    split: Split,
    classes: usize,
    norm: Normalization,
) -> Result<Dataset> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let image_bytes = read(images)?;
    let label_bytes = read(labels)?;
    let (idims, ipayload) = parse_idx(&image_bytes, IDX_IMAGES_MAGIC, images)?;
    let (ldims, lpayload) = parse_idx(&label_bytes, IDX_LABELS_MAGIC, labels)?;
    if idims[0] != ldims[0] {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            msg: format!("{} images but {} labels", idims[0], ldims[0]),
        });
    }
    let shape = InputShape::image(idims[1], idims[2], 1);
    let inputs = normalize_bytes(ipayload, shape, &norm);
    let label_vec: Vec<u32> = lpayload.iter().map(|&b| b as u32).collect();
    let mut h = crc32fast::Hasher::new();
    h.update(ipayload);
    h.update(lpayload);
    Dataset::new(split, shape, classes, inputs, label_vec, norm, h.finalize())
}

/// Loads `train-*` or `t10k-*` files from a directory holding the standard
/// uncompressed MNIST file names.
pub fn load_mnist_dir(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}
