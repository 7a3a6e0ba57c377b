//! MNIST ingestion, device partitioning and mini-batch streams.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::Batch;
use crate::seed::{derive_seed, tag};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const NUM_CLASSES: usize = 10;
pub const IMAGE_SIDE: usize = 28;
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Inputs are raw bytes divided by 255, i.e. scaled to `[0, 1]`.
pub const PIXEL_SCALE: f32 = 1.0 / 255.0;

/// Human-readable name of the input normalization, echoed into run configs.
pub const NORMALIZATION: &str = "pixel/255";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic in {what}: expected {expected}, found {found}")]
    BadMagic { what: String, expected: u32, found: u32 },
    #[error("truncated IDX {what}: expected {expected} bytes, found {actual}")]
    Truncated { what: String, expected: usize, actual: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("unsupported image dimensions {rows}x{cols}, expected 28x28")]
    BadDimensions { rows: usize, cols: usize },
    #[error("label {0} out of range")]
    BadLabel(u8),
    #[error("cannot split {samples} samples into {devices} shards")]
    TooManyShards { devices: usize, samples: usize },
    #[error("device {device} requests {requested} samples of class {class}, only {available} left")]
    InsufficientClass {
        device: usize,
        class: u8,
        requested: usize,
        available: usize,
    },
    #[error("batch size {batch} must be in 1..={n} for device {device}")]
    BadBatchSize { device: usize, batch: usize, n: usize },
}

/// Immutable labelled image set; pixels are kept as bytes and scaled on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self, DataError> {
        if pixels.len() != labels.len() * PIXELS {
            return Err(DataError::CountMismatch {
                images: pixels.len() / PIXELS,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(DataError::BadLabel(bad));
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Scaled inputs for the given sample indices, one row each.
    pub fn inputs(&self, indices: &[usize]) -> Array2<f32> {
        let mut out = Array2::<f32>::zeros((indices.len(), PIXELS));
        for (mut row, &i) in out.rows_mut().into_iter().zip(indices) {
            for (dst, &src) in row.iter_mut().zip(self.image(i)) {
                *dst = src as f32 * PIXEL_SCALE;
            }
        }
        out
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The samples whose label is in `classes`, in original order.
    pub fn filter_classes(&self, classes: &BTreeSet<u8>) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        let mut pixels = Vec::with_capacity(keep.len() * PIXELS);
        for &i in &keep {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            pixels,
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = std::fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            what: what.to_string(),
            expected: at + 4,
            actual: bytes.len(),
        })
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, what: &str) -> Result<&'a [u8], DataError> {
    let expected = header + len;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            what: what.to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(&bytes[header..expected])
}

/// Parses an IDX3 image file body into `(count, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, Vec<u8>), DataError> {
    let what = "images";
    let magic = be_u32(bytes, 0, what)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            what: what.into(),
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(DataError::BadDimensions { rows, cols });
    }
    Ok((n, payload(bytes, 16, n * PIXELS, what)?.to_vec()))
}

/// Parses an IDX1 label file body.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let what = "labels";
    let magic = be_u32(bytes, 0, what)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            what: what.into(),
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, what)? as usize;
    Ok(payload(bytes, 8, n, what)?.to_vec())
}

/// Loads an image/label IDX pair. Gzip-compressed files are accepted too.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (n, pixels) = parse_idx_images(&read_file(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_file(labels_path.as_ref())?)?;
    if n != labels.len() {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    Dataset::new(pixels, labels)
}

/// Canonical file names inside an MNIST directory.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Train and test splits loaded from one directory with the canonical names
/// (optionally with a `.gz` suffix).
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset), DataError> {
    let dir = dir.as_ref();
    let pick = |name: &str| {
        let plain = dir.join(name);
        let gz = dir.join(format!("{name}.gz"));
        if !plain.exists() && gz.exists() {
            gz
        } else {
            plain
        }
    };
    let train = load_idx(pick(TRAIN_IMAGES), pick(TRAIN_LABELS))?;
    let test = load_idx(pick(TEST_IMAGES), pick(TEST_LABELS))?;
    Ok((train, test))
}

/// One device's slice of the training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub device: usize,
    pub indices: Vec<usize>,
    pub seen_classes: BTreeSet<u8>,
}

impl Shard {
    fn new(device: usize, indices: Vec<usize>, ds: &Dataset) -> Self {
        let seen_classes = indices.iter().map(|&i| ds.labels[i]).collect();
        Self {
            device,
            indices,
            seen_classes,
        }
    }

    pub fn n_k(&self) -> usize {
        self.indices.len()
    }
}

/// Requested sample count for one class on one device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassCount {
    Count(usize),
    /// Every sample of the class not yet taken by an earlier device.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShardSpec {
    /// `per_device`, when set, keeps only `devices * per_device` samples of
    /// the shuffled set, so a scaled-down run can use full-size shards.
    Iid {
        devices: usize,
        per_device: Option<usize>,
        seed: u64,
    },
    ByClass { devices: Vec<BTreeMap<u8, ClassCount>>, seed: u64 },
}

impl ShardSpec {
    pub fn num_devices(&self) -> usize {
        match self {
            ShardSpec::Iid { devices, .. } => *devices,
            ShardSpec::ByClass { devices, .. } => devices.len(),
        }
    }
}

pub fn partition(ds: &Dataset, spec: &ShardSpec) -> Result<Vec<Shard>, DataError> {
    match spec {
        ShardSpec::Iid {
            devices,
            per_device: None,
            seed,
        } => partition_iid(ds, *devices, *seed),
        ShardSpec::Iid {
            devices,
            per_device: Some(m),
            seed,
        } => partition_iid_sized(ds, *devices, *m, *seed),
        ShardSpec::ByClass { devices, seed } => partition_by_class(ds, devices, *seed),
    }
}

/// Seeded shuffle of all samples cut into `k` contiguous blocks. When `k`
/// does not divide `N`, the first `N mod k` shards get one extra sample.
pub fn partition_iid(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<Shard>, DataError> {
    let n = ds.len();
    if k == 0 || k > n {
        return Err(DataError::TooManyShards { devices: k, samples: n });
    }
    split_shuffled(ds, k, n, seed)
}

/// Like [`partition_iid`] but every shard holds exactly `per_device` samples
/// drawn from the same seeded permutation.
pub fn partition_iid_sized(ds: &Dataset, k: usize, per_device: usize, seed: u64) -> Result<Vec<Shard>, DataError> {
    let n = ds.len();
    let used = k.saturating_mul(per_device);
    if k == 0 || per_device == 0 || used > n {
        return Err(DataError::TooManyShards { devices: k, samples: n });
    }
    split_shuffled(ds, k, used, seed)
}

fn split_shuffled(ds: &Dataset, k: usize, n: usize, seed: u64) -> Result<Vec<Shard>, DataError> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, tag::PARTITION])));
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    Ok((0..k)
        .map(|device| {
            let len = base + usize::from(device < extra);
            let shard = Shard::new(device, order[start..start + len].to_vec(), ds);
            start += len;
            shard
        })
        .collect())
}

/// Per-device class quotas. Each class's samples are shuffled once with a
/// class-specific seed and handed out to devices in device order, which keeps
/// shards disjoint.
pub fn partition_by_class(
    ds: &Dataset,
    devices: &[BTreeMap<u8, ClassCount>],
    seed: u64,
) -> Result<Vec<Shard>, DataError> {
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in ds.labels.iter().enumerate() {
        pools[l as usize].push(i);
    }
    for (class, pool) in pools.iter_mut().enumerate() {
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, tag::PARTITION, class as u64])));
    }
    let mut taken = [0usize; NUM_CLASSES];
    let mut shards = Vec::with_capacity(devices.len());
    for (device, wanted) in devices.iter().enumerate() {
        let mut indices = Vec::new();
        for (&class, &count) in wanted {
            if class as usize >= NUM_CLASSES {
                return Err(DataError::BadLabel(class));
            }
            let pool = &pools[class as usize];
            let available = pool.len() - taken[class as usize];
            let requested = match count {
                ClassCount::Count(c) => c,
                ClassCount::All => available,
            };
            if requested > available || requested == 0 {
                return Err(DataError::InsufficientClass {
                    device,
                    class,
                    requested,
                    available,
                });
            }
            let start = taken[class as usize];
            indices.extend_from_slice(&pool[start..start + requested]);
            taken[class as usize] += requested;
        }
        let mut shard = Shard::new(device, indices, ds);
        shard.seen_classes = wanted.keys().copied().collect();
        shards.push(shard);
    }
    Ok(shards)
}

/// Sample order for one epoch of one device.
fn epoch_order(shard: &Shard, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order = shard.indices.clone();
    let s = derive_seed(&[seed, tag::BATCHES, shard.device as u64, epoch]);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    order
}

/// The full batches of one epoch; a trailing partial batch is dropped.
pub struct EpochBatches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

impl Iterator for EpochBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos + self.batch > self.order.len() {
            return None;
        }
        let b = self.ds.gather(&self.order[self.pos..self.pos + self.batch]);
        self.pos += self.batch;
        Some(b)
    }
}

/// Batches for epoch `epoch` of `shard` under the global batch `seed`.
pub fn batches<'a>(
    shard: &Shard,
    ds: &'a Dataset,
    batch: usize,
    seed: u64,
    epoch: u64,
) -> Result<EpochBatches<'a>, DataError> {
    check_batch(shard, batch)?;
    Ok(EpochBatches {
        ds,
        order: epoch_order(shard, seed, epoch),
        batch,
        pos: 0,
    })
}

fn check_batch(shard: &Shard, batch: usize) -> Result<(), DataError> {
    if batch == 0 || batch > shard.n_k() {
        return Err(DataError::BadBatchSize {
            device: shard.device,
            batch,
            n: shard.n_k(),
        });
    }
    Ok(())
}

/// Endless sequence of batches across epochs, reshuffled at each epoch start.
#[derive(Debug, Clone)]
pub struct BatchStream {
    shard: Shard,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(shard: Shard, batch: usize, seed: u64) -> Result<Self, DataError> {
        check_batch(&shard, batch)?;
        let order = epoch_order(&shard, seed, 0);
        Ok(Self {
            shard,
            batch,
            seed,
            epoch: 0,
            order,
            pos: 0,
        })
    }

    pub fn shard(&self) -> &Shard {
        &self.shard
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.shard.n_k() / self.batch
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self, ds: &Dataset) -> Batch {
        if self.pos + self.batch > self.order.len() {
            self.epoch += 1;
            self.order = epoch_order(&self.shard, self.seed, self.epoch);
            self.pos = 0;
        }
        let b = ds.gather(&self.order[self.pos..self.pos + self.batch]);
        self.pos += self.batch;
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `per_class` samples of every class, labels cycling 0..10.
    pub(crate) fn synthetic(per_class: usize) -> Dataset {
        let n = per_class * NUM_CLASSES;
        let labels: Vec<u8> = (0..n).map(|i| (i % NUM_CLASSES) as u8).collect();
        let pixels = (0..n * PIXELS).map(|i| (i % 251) as u8).collect();
        Dataset::new(pixels, labels).unwrap()
    }

    fn idx_images(magic: u32, n: u32, payload: usize) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [magic, n, 28, 28] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend(std::iter::repeat_n(7u8, payload));
        v
    }

    #[test]
    fn idx_magic_numbers() {
        assert_eq!(parse_idx_images(&idx_images(2051, 2, 2 * PIXELS)).unwrap().0, 2);
        assert!(matches!(
            parse_idx_images(&idx_images(2050, 2, 2 * PIXELS)),
            Err(DataError::BadMagic { found: 2050, .. })
        ));
        let mut labels = 2049u32.to_be_bytes().to_vec();
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[1, 2, 3]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![1, 2, 3]);
        labels[3] = 0x02; // 2050
        assert!(matches!(parse_idx_labels(&labels), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn idx_truncation_and_mismatch() {
        assert!(matches!(
            parse_idx_images(&idx_images(2051, 2, PIXELS)),
            Err(DataError::Truncated { .. })
        ));
        assert!(matches!(parse_idx_images(&[0, 0, 8]), Err(DataError::Truncated { .. })));

        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, idx_images(2051, 2, 2 * PIXELS)).unwrap();
        let mut labels = 2049u32.to_be_bytes().to_vec();
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[1, 2, 3]);
        std::fs::write(&lab, labels).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(DataError::CountMismatch { images: 2, labels: 3 })));
        assert!(matches!(load_idx(dir.path().join("nope"), &lab), Err(DataError::Io { .. })));
    }

    #[test]
    fn gzip_files_are_accepted() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let gz = |bytes: &[u8]| {
            let mut e = GzEncoder::new(Vec::new(), flate2::Compression::fast());
            e.write_all(bytes).unwrap();
            e.finish().unwrap()
        };
        let mut labels = 2049u32.to_be_bytes().to_vec();
        labels.extend_from_slice(&1u32.to_be_bytes());
        labels.push(4);
        std::fs::write(dir.path().join("i.gz"), gz(&idx_images(2051, 1, PIXELS))).unwrap();
        std::fs::write(dir.path().join("l.gz"), gz(&labels)).unwrap();
        let ds = load_idx(dir.path().join("i.gz"), dir.path().join("l.gz")).unwrap();
        assert_eq!(ds.labels(), &[4]);
    }

    #[test]
    fn iid_partition_is_a_disjoint_cover() {
        let ds = synthetic(10);
        let shards = partition_iid(&ds, 7, 3).unwrap();
        let sizes: Vec<usize> = shards.iter().map(Shard::n_k).collect();
        assert_eq!(sizes, vec![15, 15, 14, 14, 14, 14, 14]);
        let mut all: Vec<usize> = shards.iter().flat_map(|s| s.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());

        let one = partition_iid(&ds, 1, 3).unwrap();
        assert_eq!(one[0].n_k(), 100);
        assert_ne!(one[0].indices, (0..100).collect::<Vec<_>>());
        assert!(matches!(partition_iid(&ds, 101, 0), Err(DataError::TooManyShards { .. })));
        assert_eq!(partition_iid(&ds, 7, 3).unwrap(), shards);
    }

    #[test]
    fn sized_iid_partition_takes_a_prefix_of_the_permutation() {
        let ds = synthetic(10);
        let sized = partition_iid_sized(&ds, 4, 6, 3).unwrap();
        assert!(sized.iter().all(|s| s.n_k() == 6));
        let full = partition_iid(&ds, 1, 3).unwrap();
        let flat: Vec<usize> = sized.iter().flat_map(|s| s.indices.clone()).collect();
        assert_eq!(flat, full[0].indices[..24]);
        assert!(partition_iid_sized(&ds, 4, 26, 3).is_err());
        assert!(partition_iid_sized(&ds, 4, 0, 3).is_err());
    }

    #[test]
    fn class_partition_quotas() {
        let ds = synthetic(60);
        let spec = vec![
            BTreeMap::from([(0, ClassCount::Count(50)), (1, ClassCount::Count(50))]),
            BTreeMap::from([(7, ClassCount::Count(50)), (8, ClassCount::Count(50))]),
        ];
        let shards = partition_by_class(&ds, &spec, 1).unwrap();
        assert_eq!(shards[0].n_k(), 100);
        assert_eq!(shards[1].n_k(), 100);
        assert!(shards[0].indices.iter().all(|&i| ds.labels()[i] <= 1));
        assert_eq!(shards[1].seen_classes, BTreeSet::from([7, 8]));

        let spec = vec![
            BTreeMap::from([(0, ClassCount::Count(25)), (1, ClassCount::All)]),
            BTreeMap::from([(0, ClassCount::All)]),
        ];
        let shards = partition_by_class(&ds, &spec, 1).unwrap();
        assert_eq!(shards[0].n_k(), 85);
        assert_eq!(shards[1].n_k(), 35);

        let greedy = vec![BTreeMap::from([(2, ClassCount::All)]), BTreeMap::from([(2, ClassCount::Count(1))])];
        assert!(matches!(
            partition_by_class(&ds, &greedy, 1),
            Err(DataError::InsufficientClass { device: 1, class: 2, requested: 1, available: 0 })
        ));
    }

    #[test]
    fn epoch_batching_drops_the_remainder() {
        let ds = synthetic(10);
        let shard = Shard::new(0, (0..95).collect(), &ds);
        assert_eq!(batches(&shard, &ds, 10, 0, 0).unwrap().count(), 9);
        assert_eq!(batches(&shard, &ds, 95, 0, 0).unwrap().count(), 1);
        assert!(batches(&shard, &ds, 96, 0, 0).is_err());
        assert!(batches(&shard, &ds, 0, 0, 0).is_err());
    }

    #[test]
    fn stream_reshuffles_each_epoch() {
        let ds = synthetic(10);
        let shard = Shard::new(2, (0..20).collect(), &ds);
        let mut stream = BatchStream::new(shard.clone(), 5, 9).unwrap();
        let first: Vec<Batch> = (0..4).map(|_| stream.next_batch(&ds)).collect();
        let from_iter: Vec<Batch> = batches(&shard, &ds, 5, 9, 0).unwrap().collect();
        assert_eq!(first, from_iter);
        let second: Vec<Batch> = (0..4).map(|_| stream.next_batch(&ds)).collect();
        assert_eq!(stream.epoch(), 1);
        assert_ne!(first, second);
        assert_eq!(second, batches(&shard, &ds, 5, 9, 1).unwrap().collect::<Vec<_>>());
    }
}
