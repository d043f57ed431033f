mod common;

use std::collections::BTreeSet;

use linpath::data::{load_cifar_dir, load_idx, load_mnist_dir, synthetic_blobs, Split};
use linpath::nn::{evaluate_batches, InputShape, ModelSpec};
use linpath::trainer::{train_collect, Hyperparams};
use linpath::Error;

fn idx(magic: [u8; 4], dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_vec();
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

#[test]
fn crafted_idx_pair() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..18).map(|i| (i * 15) as u8).collect();
    std::fs::write(
        dir.path().join("img"),
        idx([0, 0, 8, 3], &[2, 3, 3], &pixels),
    )
    .unwrap();
    std::fs::write(dir.path().join("lab"), idx([0, 0, 8, 1], &[2], &[4, 9])).unwrap();
    let d = load_idx(dir.path().join("img"), dir.path().join("lab"), Split::Train).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.shape(), InputShape::image(3, 3, 1));
    assert_eq!(d.labels(), [4, 9]);
    for (got, &byte) in d.denormalized().iter().zip(&pixels) {
        assert!((got - byte as f32 / 255.0).abs() < 1e-6);
    }
}

#[test]
fn label_file_as_images_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("lab"), idx([0, 0, 8, 1], &[2], &[1, 2])).unwrap();
    let r = load_idx(dir.path().join("lab"), dir.path().join("lab"), Split::Train);
    assert!(matches!(r, Err(Error::Format { .. })), "{r:?}");
    let missing = load_idx(
        dir.path().join("none"),
        dir.path().join("lab"),
        Split::Train,
    );
    assert!(matches!(missing, Err(Error::Io { .. })));
}

#[test]
fn real_mnist_counts() {
    let dir = common::mnist_dir();
    if !dir.join("t10k-images-idx3-ubyte").exists() {
        eprintln!("MNIST not found at {}, skipping", dir.display());
        return;
    }
    let test = load_mnist_dir(&dir, Split::Test).unwrap();
    assert_eq!(test.len(), 10_000);
    assert_eq!(test.shape(), InputShape::image(28, 28, 1));
    let labels: BTreeSet<u32> = test.labels().iter().copied().collect();
    assert_eq!(labels, (0..10).collect());
    let train = load_mnist_dir(&dir, Split::Train).unwrap();
    assert_eq!(train.len(), 60_000);
    assert_ne!(train.digest(), test.digest());
}

#[test]
fn cifar_format_directory() {
    let dir = tempfile::tempdir().unwrap();
    let record = |label: u8, k: usize| {
        let mut r = vec![label];
        r.extend((0..3072).map(|i| ((i * 7 + k * 13) % 256) as u8));
        r
    };
    for b in 1..=5 {
        let bytes: Vec<u8> = (0..20)
            .flat_map(|k| record((k % 10) as u8, b * 100 + k))
            .collect();
        std::fs::write(dir.path().join(format!("data_batch_{b}.bin")), bytes).unwrap();
    }
    let test: Vec<u8> = (0..10).flat_map(|k| record(k as u8, k)).collect();
    std::fs::write(dir.path().join("test_batch.bin"), test).unwrap();

    let train = load_cifar_dir(dir.path(), Split::Train).unwrap();
    assert_eq!(train.len(), 100);
    assert_eq!(train.shape(), InputShape::image(32, 32, 3));
    let sub = train.subsample_per_class(3, 1).unwrap();
    assert_eq!(sub.len(), 30);
    assert_eq!(
        sub.digest(),
        train.subsample_per_class(3, 1).unwrap().digest()
    );
    assert_eq!(
        train.subsample_per_class(11, 1).unwrap().len(),
        100,
        "at most k per class"
    );
    assert_eq!(load_cifar_dir(dir.path(), Split::Test).unwrap().len(), 10);

    std::fs::write(dir.path().join("test_batch.bin"), vec![0u8; 3000]).unwrap();
    assert!(matches!(
        load_cifar_dir(dir.path(), Split::Test),
        Err(Error::Format { .. })
    ));
}

#[test]
fn synthetic_is_deterministic() {
    let a = synthetic_blobs(4, 6, 50, 2.0, 3).unwrap();
    let b = synthetic_blobs(4, 6, 50, 2.0, 3).unwrap();
    assert_eq!(a.train.digest(), b.train.digest());
    assert_eq!(a.test.digest(), b.test.digest());
    assert_eq!(a.train.inputs(), b.train.inputs());
    assert_ne!(
        a.train.digest(),
        synthetic_blobs(4, 6, 50, 2.0, 4).unwrap().train.digest()
    );
    assert_eq!(a.train.len() + a.test.len(), 200);
}

#[test]
fn separated_blobs_are_linearly_learnable() {
    let s = synthetic_blobs(4, 10, 250, 12.0, 1).unwrap();
    let spec = ModelSpec::mlp(InputShape::Flat(10), &[], 4);
    let ckpts = train_collect(&spec, &Hyperparams::new(0.05, 0.9, 32, 100), &s.train, 0).unwrap();
    let r = evaluate_batches(&ckpts.last().unwrap().params, &spec, s.test.batches(256)).unwrap();
    assert!(r.error < 0.01, "test error {}", r.error);
}

#[test]
fn zero_separation_is_chance() {
    let s = synthetic_blobs(2, 5, 1000, 0.0, 2).unwrap();
    let fresh = synthetic_blobs(2, 5, 2500, 0.0, 99).unwrap();
    let spec = ModelSpec::mlp(InputShape::Flat(5), &[8], 2);
    let ckpts = train_collect(&spec, &Hyperparams::new(0.05, 0.9, 32, 200), &s.train, 0).unwrap();
    let r = evaluate_batches(
        &ckpts.last().unwrap().params,
        &spec,
        fresh.train.batches(512),
    )
    .unwrap();
    // 4000 fresh examples: 3 standard errors of a fair coin is about 0.024.
    assert!((r.error - 0.5).abs() < 0.04, "error {}", r.error);
}
