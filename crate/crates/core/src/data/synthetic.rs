use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::nn::InputShape;

#[derive(Debug, Clone)]
pub struct SyntheticSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Gaussian clusters with unit variance. Class `c` is centered at
/// `separation * u_c` for a seeded random unit vector `u_c`. One fifth of
/// the examples (at least one) go to the test split by seeded permutation.
pub fn synthetic_blobs(
    classes: usize,
    dims: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<SyntheticSplit> {
    if classes < 2 || dims < 1 || per_class < 1 {
        return Err(Error::InvalidArgument(format!(
            "synthetic blobs need classes >= 2, dims >= 1, per_class >= 1 (got {classes}, {dims}, {per_class})"
        )));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "separation must be finite and >= 0, got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut u: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = u
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        u.iter_mut().for_each(|v| *v *= separation / norm);
        centers.push(u);
    }
    let total = classes * per_class;
    let mut x = Vec::with_capacity(total * dims);
    let mut y = Vec::with_capacity(total);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &m in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                x.push((m + z) as f32);
            }
            y.push(c as u32);
        }
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let n_test = (total / 5).max(1);
    let (test_idx, train_idx) = order.split_at(n_test);
    let mut test_idx = test_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    let build = |idx: &[usize], split: Split| {
        let mut xs = Vec::with_capacity(idx.len() * dims);
        let mut ys = Vec::with_capacity(idx.len());
        let mut h = crc32fast::Hasher::new();
        for &i in idx {
            let row = &x[i * dims..(i + 1) * dims];
            for v in row {
                h.update(&v.to_le_bytes());
            }
            h.update(&y[i].to_le_bytes());
            xs.extend_from_slice(row);
            ys.push(y[i]);
        }
        Dataset::new(
            split,
            InputShape::Flat(dims),
            classes,
            xs,
            ys,
            Normalization::identity(1),
            h.finalize(),
        )
    };
    Ok(SyntheticSplit {
        train: build(train_idx.as_slice(), Split::Train)?,
        test: build(&test_idx, Split::Test)?,
    })
}
