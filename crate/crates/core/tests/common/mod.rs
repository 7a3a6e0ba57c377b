//! Shared fixtures: a learnable synthetic digit set, IDX writers and the
//! real MNIST loader.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use p2pl::config::DATA_DIR_ENV;
use p2pl::data::{self, Dataset, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PIXELS: usize = 784;

/// `per_class` images of every digit. Class `c` brightens rows
/// `2c..2c + 3` of the 28x28 grid; the rest is low-level noise.
pub fn synthetic(per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(10 * per_class * PIXELS);
    let mut labels = Vec::with_capacity(10 * per_class);
    for i in 0..10 * per_class {
        let c = (i % 10) as u8;
        for p in 0..PIXELS {
            let row = p / 28;
            let lit = row >= 2 * c as usize && row < 2 * c as usize + 3;
            pixels.push(if lit { rng.gen_range(160..=255) } else { rng.gen_range(0..40) });
        }
        labels.push(c);
    }
    Dataset::new(pixels, labels).unwrap()
}

fn idx_images(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [2051u32, ds.len() as u32, 28, 28] {
        out.extend(v.to_be_bytes());
    }
    for i in 0..ds.len() {
        out.extend_from_slice(ds.image(i));
    }
    out
}

fn idx_labels(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [2049u32, ds.len() as u32] {
        out.extend(v.to_be_bytes());
    }
    out.extend_from_slice(ds.labels());
    out
}

/// Writes `train` and `test` under the canonical MNIST file names.
pub fn write_mnist_dir(dir: &Path, train: &Dataset, test: &Dataset) {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join(TRAIN_IMAGES), idx_images(train)).unwrap();
    std::fs::write(dir.join(TRAIN_LABELS), idx_labels(train)).unwrap();
    std::fs::write(dir.join(TEST_IMAGES), idx_images(test)).unwrap();
    std::fs::write(dir.join(TEST_LABELS), idx_labels(test)).unwrap();
}

pub fn mnist_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

/// The real MNIST splits; fails with a pointer to `fetch-data` when absent.
pub fn mnist() -> (Dataset, Dataset) {
    let dir = mnist_dir();
    data::load_mnist_dir(&dir).unwrap_or_else(|e| {
        panic!("MNIST not found in {} ({e}); run `p2pl fetch-data --out {}`", dir.display(), dir.display())
    })
}
