//! Dataset ingestion, normalization, augmentation and batching.
//!
//! Images are kept as raw bytes; normalization stores per-channel statistics
//! and is applied when a batch is assembled.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;
pub const DATA_DIR_ENV: &str = "DYNEXEC_DATA";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{name}: bad magic at byte 0: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        name: String,
        expected: u32,
        found: u32,
    },
    #[error("{name}: truncated: expected {expected} bytes, found {actual}")]
    Truncated {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("{name}: label {label} at byte {offset} is outside [0, {classes})")]
    LabelOutOfRange {
        name: String,
        offset: usize,
        label: u8,
        classes: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("channel {0} has zero standard deviation")]
    ZeroStd(usize),
    #[error("class {class} has {have} examples, {want} requested")]
    NotEnoughExamples { class: usize, have: usize, want: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mnist" => Ok(Self::Mnist),
            "cifar10" => Ok(Self::Cifar10),
            other => Err(format!("unknown dataset {other:?} (mnist|cifar10)")),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mnist => "mnist",
            Self::Cifar10 => "cifar10",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Images in `[0, 1]` pixel scale, stored as bytes, with optional per-channel
/// normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    pixels: Vec<u8>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    stats: Option<ChannelStats>,
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn need(name: &str, bytes: &[u8], expected: usize) -> Result<(), DataError> {
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            name: name.to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses an IDX image file: `(n, h, w, pixels)`.
pub fn parse_idx_images(name: &str, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    need(name, bytes, 16)?;
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            name: name.to_string(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let (n, h, w) = (
        be_u32(bytes, 4) as usize,
        be_u32(bytes, 8) as usize,
        be_u32(bytes, 12) as usize,
    );
    let expected = 16 + n * h * w;
    need(name, bytes, expected)?;
    Ok((n, h, w, bytes[16..expected].to_vec()))
}

/// Parses an IDX label file. Labels must be below `classes`.
pub fn parse_idx_labels(name: &str, bytes: &[u8], classes: usize) -> Result<Vec<usize>, DataError> {
    need(name, bytes, 8)?;
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            name: name.to_string(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4) as usize;
    need(name, bytes, 8 + n)?;
    bytes[8..8 + n]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (b as usize) < classes {
                Ok(b as usize)
            } else {
                Err(DataError::LabelOutOfRange {
                    name: name.to_string(),
                    offset: 8 + i,
                    label: b,
                    classes,
                })
            }
        })
        .collect()
}

/// Loads a matching pair of IDX image and label files.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset, DataError> {
    let (_, h, w, pixels) = parse_idx_images(&images.display().to_string(), &read_file(images)?)?;
    let labels = parse_idx_labels(&labels.display().to_string(), &read_file(labels)?, 10)?;
    Dataset::from_raw([1, h, w], pixels, labels, 10, split)
}

/// Parses concatenated CIFAR-10 binary records (label byte + 3072 planar pixels).
pub fn parse_cifar(name: &str, bytes: &[u8]) -> Result<(Vec<u8>, Vec<usize>), DataError> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::Truncated {
            name: name.to_string(),
            expected: bytes.len().div_ceil(CIFAR_RECORD) * CIFAR_RECORD,
            actual: bytes.len(),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(DataError::LabelOutOfRange {
                name: name.to_string(),
                offset: i * CIFAR_RECORD,
                label: rec[0],
                classes: 10,
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar_binary(paths: &[PathBuf], split: Split) -> Result<Dataset, DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (px, lb) = parse_cifar(&p.display().to_string(), &read_file(p)?)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    Dataset::from_raw([3, 32, 32], pixels, labels, 10, split)
}

/// `flag`, else `$DYNEXEC_DATA`, else `./data`.
pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Conventional file locations below a data root:
/// `mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte` and
/// `cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin`.
pub fn load_split(kind: DatasetKind, root: &Path, split: Split) -> Result<Dataset, DataError> {
    match kind {
        DatasetKind::Mnist => {
            let dir = root.join("mnist");
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            load_idx(
                &dir.join(format!("{prefix}-images-idx3-ubyte")),
                &dir.join(format!("{prefix}-labels-idx1-ubyte")),
                split,
            )
        }
        DatasetKind::Cifar10 => {
            let dir = root.join("cifar-10-batches-bin");
            let files: Vec<PathBuf> = match split {
                Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                Split::Test => vec![dir.join("test_batch.bin")],
            };
            load_cifar_binary(&files, split)
        }
    }
}

impl Dataset {
    pub fn from_raw(
        shape: [usize; 3],
        pixels: Vec<u8>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        let per = shape.iter().product::<usize>();
        if per == 0 || pixels.len() % per != 0 || pixels.len() / per != labels.len() {
            return Err(DataError::CountMismatch {
                images: if per == 0 { 0 } else { pixels.len() / per },
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            shape,
            pixels,
            labels,
            num_classes,
            split,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn stats(&self) -> Option<&ChannelStats> {
        self.stats.as_ref()
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Per-channel mean and population std of the `[0, 1]`-scaled pixels.
    pub fn compute_stats(&self) -> Result<ChannelStats, DataError> {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in self.pixels.chunks_exact(self.image_len()) {
            for ch in 0..c {
                for &b in &img[ch * plane..(ch + 1) * plane] {
                    let v = b as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (self.len() * plane) as f64;
        let mut stats = ChannelStats {
            mean: Vec::with_capacity(c),
            std: Vec::with_capacity(c),
        };
        for ch in 0..c {
            let m = sum[ch] / count;
            let var = (sq[ch] / count - m * m).max(0.0);
            if var.sqrt() < 1e-12 {
                return Err(DataError::ZeroStd(ch));
            }
            stats.mean.push(m);
            stats.std.push(var.sqrt());
        }
        Ok(stats)
    }

    pub fn with_stats(mut self, stats: ChannelStats) -> Result<Self, DataError> {
        if stats.mean.len() != self.shape[0] || stats.std.len() != self.shape[0] {
            return Err(DataError::Invalid("statistics do not match channel count".into()));
        }
        if let Some(ch) = stats.std.iter().position(|&s| s <= 0.0) {
            return Err(DataError::ZeroStd(ch));
        }
        self.stats = Some(stats);
        Ok(self)
    }

    /// Image `i` as floats, normalized if statistics are attached.
    pub fn image(&self, i: usize) -> Vec<f64> {
        let n = self.image_len();
        let plane = self.shape[1] * self.shape[2];
        let raw = &self.pixels[i * n..(i + 1) * n];
        match &self.stats {
            None => raw.iter().map(|&b| b as f64 / 255.0).collect(),
            Some(s) => raw
                .iter()
                .enumerate()
                .map(|(j, &b)| {
                    let ch = j / plane;
                    (b as f64 / 255.0 - s.mean[ch]) / s.std[ch]
                })
                .collect(),
        }
    }

    /// Stacks the given examples into an `N×C×H×W` tensor, augmenting each
    /// image when `augment` supplies an rng.
    pub fn batch<R: Rng + ?Sized>(&self, indices: &[usize], mut augment: Option<&mut R>) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.shape;
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            let img = self.image(i);
            match augment.as_deref_mut() {
                Some(rng) => data.extend(augment_image(&img, self.shape, rng)),
                None => data.extend(img),
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new(vec![indices.len(), c, h, w], data).expect("batch size matches"),
            labels,
        )
    }

    /// The whole split as one tensor (no augmentation).
    pub fn all(&self) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch::<ChaCha8Rng>(&idx, None)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            pixels.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        Self {
            shape: self.shape,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            stats: self.stats.clone(),
        }
    }

    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// The first `per_class` examples of every class, in original order.
    pub fn balanced_subset(&self, per_class: usize) -> Result<Self, DataError> {
        let mut seen = vec![0usize; self.num_classes];
        let mut idx = Vec::with_capacity(per_class * self.num_classes);
        for (i, &l) in self.labels.iter().enumerate() {
            if seen[l] < per_class {
                seen[l] += 1;
                idx.push(i);
            }
        }
        if let Some((class, &have)) = seen.iter().enumerate().find(|(_, &s)| s < per_class) {
            return Err(DataError::NotEnoughExamples {
                class,
                have,
                want: per_class,
            });
        }
        Ok(self.select(&idx))
    }
}

/// Computes statistics on `train` and applies them to both splits.
pub fn normalize(train: Dataset, eval: Dataset) -> Result<(Dataset, Dataset), DataError> {
    let stats = train.compute_stats()?;
    Ok((train.with_stats(stats.clone())?, eval.with_stats(stats)?))
}

pub const AUGMENT_PAD: usize = 4;

/// Crop offset into the padded image and flip decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentOutcome {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentOutcome {
    pub const IDENTITY: Self = Self {
        dy: AUGMENT_PAD,
        dx: AUGMENT_PAD,
        flip: false,
    };

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            dy: rng.random_range(0..=2 * AUGMENT_PAD),
            dx: rng.random_range(0..=2 * AUGMENT_PAD),
            flip: rng.random_bool(0.5),
        }
    }
}

/// Zero-pads by [`AUGMENT_PAD`], crops back to `h×w` at the outcome's offset,
/// then optionally mirrors horizontally.
pub fn apply_augment(img: &[f64], shape: [usize; 3], o: AugmentOutcome) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + o.dy) as isize - AUGMENT_PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + o.dx) as isize - AUGMENT_PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let tx = if o.flip { w - 1 - x } else { x };
                out[(ch * h + y) * w + tx] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

pub fn augment_image<R: Rng + ?Sized>(img: &[f64], shape: [usize; 3], rng: &mut R) -> Vec<f64> {
    apply_augment(img, shape, AugmentOutcome::draw(rng))
}

/// Seeded per-epoch shuffling. The final batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    n: usize,
    batch: usize,
    seed: u64,
}

impl BatchIterator {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        assert!(batch > 0, "batch size must be positive");
        Self { n, batch, seed }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch)
    }

    pub fn permutation(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        self.permutation(epoch)
            .chunks(self.batch)
            .map(<[usize]>::to_vec)
            .collect()
    }
}
