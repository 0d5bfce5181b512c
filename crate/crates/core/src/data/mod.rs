//! MNIST (IDX) and CIFAR-10 (binary) loaders, batching, and the checkpoint format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IdpError, Result};
use crate::tensor::Tensor;

mod checkpoint;

pub use checkpoint::{inspect_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, TensorRecord, CHECKPOINT_VERSION};

pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub split: Split,
    /// `count × C × H × W`, normalized.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(kind: DatasetKind, split: Split, images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(IdpError::dims("Dataset", images.shape(), &[labels.len()]));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(IdpError::LabelRange { file: format!("{kind:?} {split:?}"), index, label: label as u8, classes });
        }
        Ok(Dataset { kind, split, images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn subset(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Dataset {
            kind: self.kind,
            split: self.split,
            images: self.images.gather_batch(&idx),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (self.images.gather_batch(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// A permutation of the samples, reproducible from `seed`.
    pub fn shuffled_order(&self, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| IdpError::io(path, e))
}

fn format_error(file: &str, offset: usize, message: impl Into<String>) -> IdpError {
    IdpError::Format { file: file.to_string(), offset: offset as u64, message: message.into() }
}

fn be_u32(bytes: &[u8], offset: usize, file: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_error(file, bytes.len(), format!("header needs {} bytes, file has {}", offset + 4, bytes.len())))
}

fn check_length(bytes: &[u8], expected: usize, file: &str) -> Result<()> {
    if bytes.len() != expected {
        let offset = bytes.len().min(expected);
        return Err(format_error(file, offset, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    Ok(())
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_error(file, 0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    let expected = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| format_error(file, 4, format!("declared size {n}x{rows}x{cols} overflows")))?;
    check_length(bytes, expected, file)?;
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// Parses an IDX label file; every label must be below `classes`.
pub fn parse_idx_labels(bytes: &[u8], file: &str, classes: usize) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_error(file, 0, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, file)? as usize;
    check_length(bytes, 8 + n, file)?;
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(index, &label)| {
            if (label as usize) < classes {
                Ok(label as usize)
            } else {
                Err(IdpError::LabelRange { file: file.to_string(), index, label, classes })
            }
        })
        .collect()
}

fn load_mnist_split(dir: &Path, images: &str, labels: &str, split: Split) -> Result<Dataset> {
    let (ipath, lpath) = (dir.join(images), dir.join(labels));
    let (iname, lname) = (ipath.display().to_string(), lpath.display().to_string());
    let (n, rows, cols, pixels) = parse_idx_images(&read(&ipath)?, &iname)?;
    if (rows, cols) != (28, 28) {
        return Err(format_error(&iname, 8, format!("expected 28x28 images, found {rows}x{cols}")));
    }
    let labels = parse_idx_labels(&read(&lpath)?, &lname, CLASSES)?;
    if labels.len() != n {
        return Err(format_error(&lname, 4, format!("{} labels for {n} images", labels.len())));
    }
    let data = pixels.iter().map(|&b| (b as f32 / 255.0 - MNIST_MEAN) / MNIST_STD).collect();
    Dataset::new(DatasetKind::Mnist, split, Tensor::new(vec![n, 1, rows, cols], data)?, labels, CLASSES)
}

/// Reads the four standard IDX files from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    Ok((
        load_mnist_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", Split::Train)?,
        load_mnist_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", Split::Test)?,
    ))
}

/// Parses CIFAR-10 binary records (label byte, then red, green, blue planes).
/// Returns raw labels and pixel bytes in record order.
pub fn parse_cifar_records(bytes: &[u8], file: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(format_error(
            file,
            whole,
            format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (index, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(IdpError::LabelRange { file: file.to_string(), index, label: rec[0], classes: CLASSES });
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

fn cifar_dataset(files: &[PathBuf], split: Split, limit: Option<usize>) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in files {
        if limit.is_some_and(|n| labels.len() >= n) {
            break;
        }
        let (l, p) = parse_cifar_records(&read(path)?, &path.display().to_string())?;
        labels.extend(l);
        pixels.extend(p);
    }
    let n = limit.map_or(labels.len(), |n| n.min(labels.len()));
    labels.truncate(n);
    let plane = 32 * 32;
    let data = pixels[..n * 3 * plane]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let c = (i / plane) % 3;
            (b as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]
        })
        .collect();
    Dataset::new(DatasetKind::Cifar10, split, Tensor::new(vec![n, 3, 32, 32], data)?, labels, CLASSES)
}

/// Reads `data_batch_1..5.bin` and `test_batch.bin` from `dir`. With
/// `train_subset`, only the first that many training records are kept.
pub fn load_cifar10(dir: impl AsRef<Path>, train_subset: Option<usize>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    Ok((
        cifar_dataset(&train, Split::Train, train_subset)?,
        cifar_dataset(&[dir.join("test_batch.bin")], Split::Test, None)?,
    ))
}

pub fn load(kind: DatasetKind, dir: impl AsRef<Path>, train_subset: Option<usize>) -> Result<(Dataset, Dataset)> {
    match kind {
        DatasetKind::Mnist => {
            let (train, test) = load_mnist(dir)?;
            Ok((match train_subset {
                Some(n) => train.subset(n),
                None => train,
            }, test))
        }
        DatasetKind::Cifar10 => load_cifar10(dir, train_subset),
    }
}

/// Only the test split.
pub fn load_test(kind: DatasetKind, dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    match kind {
        DatasetKind::Mnist => load_mnist_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", Split::Test),
        DatasetKind::Cifar10 => cifar_dataset(&[dir.join("test_batch.bin")], Split::Test, None),
    }
}

/// Random crop with 4-pixel zero padding and random horizontal flip, in place,
/// on a `B × C × H × W` batch.
pub fn augment_crop_flip(batch: &mut Tensor<f32>, rng: &mut impl Rng) {
    let s = batch.shape().to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let data = batch.data_mut();
    let mut src = vec![0.0f32; c * h * w];
    for n in 0..b {
        let sample = &mut data[n * c * h * w..(n + 1) * c * h * w];
        src.copy_from_slice(sample);
        let dy = rng.gen_range(0..=8) as isize - 4;
        let dx = rng.gen_range(0..=8) as isize - 4;
        let flip = rng.gen_bool(0.5);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        src[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                    sample[(ch * h + y) * w + x] = v;
                }
            }
        }
    }
}

/// Per-channel mean and standard deviation of raw `[0, 1]` pixel values,
/// for recomputing the normalization constants.
pub fn channel_statistics(pixels: &[u8], channels: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut count = vec![0usize; channels];
    for (i, &b) in pixels.iter().enumerate() {
        let c = (i / plane) % channels;
        let v = b as f64 / 255.0;
        sum[c] += v;
        sq[c] += v * v;
        count[c] += 1;
    }
    let mean: Vec<f64> = (0..channels).map(|c| sum[c] / count[c].max(1) as f64).collect();
    let std = (0..channels)
        .map(|c| (sq[c] / count[c].max(1) as f64 - mean[c] * mean[c]).max(0.0).sqrt())
        .collect();
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, body: usize) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend(x.to_be_bytes());
        }
        v.extend(std::iter::repeat_n(7u8, body));
        v
    }

    #[test]
    fn idx_images_round_trip() {
        let (n, r, c, px) = parse_idx_images(&idx_images(2, 2, 3, 12), "t").unwrap();
        assert_eq!((n, r, c, px.len()), (2, 2, 3, 12));
    }

    #[test]
    fn idx_truncated_reports_lengths() {
        let err = parse_idx_images(&idx_images(2, 2, 3, 11), "t").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, IdpError::Format { offset: 27, .. }), "{msg}");
        assert!(msg.contains("expected 28") && msg.contains("found 27"), "{msg}");
    }

    #[test]
    fn idx_label_out_of_range() {
        let mut v = Vec::new();
        v.extend(IDX_LABELS_MAGIC.to_be_bytes());
        v.extend(3u32.to_be_bytes());
        v.extend([1, 10, 2]);
        assert!(matches!(
            parse_idx_labels(&v, "l", 10),
            Err(IdpError::LabelRange { index: 1, label: 10, .. })
        ));
    }

    #[test]
    fn cifar_record_layout() {
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 7;
        rec[1] = 200;
        rec[1 + 1024] = 100;
        let (labels, px) = parse_cifar_records(&rec, "c").unwrap();
        assert_eq!(labels, vec![7]);
        assert_eq!((px[0], px[1024]), (200, 100));
        assert!(parse_cifar_records(&rec[..CIFAR_RECORD - 1], "c").is_err());
    }

    #[test]
    fn shuffle_is_reproducible() {
        let images = Tensor::zeros(&[5, 1, 1, 1]);
        let d = Dataset::new(DatasetKind::Mnist, Split::Train, images, vec![0; 5], 10).unwrap();
        assert_eq!(d.shuffled_order(3), d.shuffled_order(3));
        assert_ne!(d.shuffled_order(3), d.shuffled_order(4));
    }

    #[test]
    fn augmentation_only_moves_or_drops_pixels() {
        let data: Vec<f32> = (0..2 * 3 * 8 * 8).map(|i| (i % 7) as f32 + 1.0).collect();
        let mut t = Tensor::new(vec![2, 3, 8, 8], data.clone()).unwrap();
        augment_crop_flip(&mut t, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(t.shape(), &[2, 3, 8, 8]);
        assert!(t.data().iter().all(|v| *v == 0.0 || data.contains(v)));
        let before: f32 = data.iter().sum();
        assert!(t.data().iter().sum::<f32>() <= before);
    }
}
