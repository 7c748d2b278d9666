//! Dataset ingestion, preprocessing, augmentation and batching.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;
pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";
/// Training samples held out for validation.
pub const MNIST_VALIDATION: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Images `[N, H, W, C]` with class labels in `[0, class_count)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, split: Split, class_count: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Consistency(format!(
                "images must be [N, H, W, C], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Consistency(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            split,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, index: usize) -> Result<Tensor<f32>> {
        if index >= self.len() {
            return Err(Error::OutOfRange {
                what: "image",
                index,
                limit: self.len(),
            });
        }
        self.images.slice_outer(index, 1)
    }

    /// Images and labels of the given samples, in order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
        }
        let [h, w, c] = self.image_shape();
        let images = Tensor::from_vec(&[indices.len(), h, w, c], data)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.gather(indices)?;
        Dataset::new(images, labels, self.split, self.class_count)
    }

    /// First `count` samples.
    pub fn take(&self, count: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..count.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Splits off the last `count` samples as a validation set.
    pub fn split_tail(&self, count: usize) -> Result<(Dataset, Dataset)> {
        if count == 0 || count >= self.len() {
            return Err(Error::Consistency(format!(
                "cannot hold out {count} of {} samples",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..self.len() - count).collect();
        let tail: Vec<usize> = (self.len() - count..self.len()).collect();
        let mut val = self.subset(&tail)?;
        val.split = Split::Validation;
        Ok((self.subset(&head)?, val))
    }
}

// ---- IDX ------------------------------------------------------------------

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::DataNotFound {
            path: path.to_path_buf(),
            hint: "download the four MNIST IDX files (uncompressed) into this directory, \
                   e.g. with scripts/fetch-mnist.sh, or pass --data-dir"
                .into(),
        },
        _ => Error::Io(e),
    })
}

fn check_header(path: &Path, bytes: &[u8], header: usize) -> Result<()> {
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header,
            actual: bytes.len(),
        });
    }
    Ok(())
}

fn check_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    Ok(())
}

/// Parses an IDX3 image file into `[N, rows, cols, 1]` with pixels in `[0, 1]`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    check_header(path, bytes, 16)?;
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let (n, rows, cols) = (
        be_u32(bytes, 4) as usize,
        be_u32(bytes, 8) as usize,
        be_u32(bytes, 12) as usize,
    );
    let expected = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: format!("dimensions {n}x{rows}x{cols} overflow"),
        })?;
    check_len(path, bytes, expected)?;
    let pixels = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(&[n, rows, cols, 1], pixels).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        message: format!("degenerate dimensions {n}x{rows}x{cols}"),
    })
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    check_header(path, bytes, 8)?;
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4) as usize;
    check_len(path, bytes, 8 + n)?;
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads an MNIST image/label IDX pair.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = parse_idx_images(images_path, &read_file(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &read_file(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Consistency(format!(
            "{} holds {} images but {} holds {} labels",
            images_path.display(),
            images.shape()[0],
            labels_path.display(),
            labels.len()
        )));
    }
    Dataset::new(images, labels, split, MNIST_CLASSES)
}

/// Loads the official train and test files from `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let p = |name: &str| -> PathBuf { dir.join(name) };
    let train = load_mnist_idx(&p(MNIST_TRAIN_IMAGES), &p(MNIST_TRAIN_LABELS), Split::Train)?;
    let test = load_mnist_idx(&p(MNIST_TEST_IMAGES), &p(MNIST_TEST_LABELS), Split::Test)?;
    Ok((train, test))
}

// ---- synthetic shapes -------------------------------------------------------

pub const SYNTH_SIZE: usize = 32;
pub const SYNTH_CLASSES: usize = 4;

/// Class names of [`synth_shapes`], indexed by label.
pub const SYNTH_CLASS_NAMES: [&str; SYNTH_CLASSES] =
    ["filled-square", "hollow-square", "diagonal-stripe", "disk"];

/// Deterministic 32x32 greyscale images of four parametric shape classes
/// with jittered position, size and intensity plus background noise.
/// Labels cycle `0, 1, 2, 3, ...` so every class gets `n / 4` or one more.
pub fn synth_shapes(n: usize, seed: u64) -> Result<Dataset> {
    if n < SYNTH_CLASSES {
        return Err(Error::Consistency(format!(
            "need at least {SYNTH_CLASSES} samples for a balanced synthetic set, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = SYNTH_SIZE;
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % SYNTH_CLASSES;
        let size = rng.gen_range(8..=14) as f32;
        let margin = size / 2.0 + 1.0;
        let cx = rng.gen_range(margin..side as f32 - margin);
        let cy = rng.gen_range(margin..side as f32 - margin);
        let intensity = rng.gen_range(0.6f32..1.0);
        let flip_diagonal = rng.gen_bool(0.5);
        let offset = rng.gen_range(-6.0f32..6.0);
        for y in 0..side {
            for x in 0..side {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let (dx, dy) = (px - cx, py - cy);
                let half = size / 2.0;
                let inside = match label {
                    0 => dx.abs() <= half && dy.abs() <= half,
                    1 => {
                        let m = dx.abs().max(dy.abs());
                        m <= half && m >= half - 2.0
                    }
                    2 => {
                        let d = if flip_diagonal {
                            px - py
                        } else {
                            px + py - side as f32
                        };
                        (d - offset).abs() <= 2.5
                    }
                    _ => dx * dx + dy * dy <= half * half,
                };
                let noise = rng.gen_range(0.0f32..0.2);
                data.push(if inside { (intensity + noise * 0.5).min(1.0) } else { noise });
            }
        }
        labels.push(label);
    }
    let images = Tensor::from_vec(&[n, side, side, 1], data)?;
    Dataset::new(images, labels, Split::Train, SYNTH_CLASSES)
}

// ---- preprocessing ----------------------------------------------------------

/// Zero-padding, per-channel standardization and horizontal-flip augmentation.
/// Statistics are fitted on the (padded) training split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub pad_to: Option<usize>,
    pub hflip_prob: f64,
    mean: Option<Vec<f64>>,
    std: Option<Vec<f64>>,
}

impl Preprocessor {
    pub fn new(pad_to: Option<usize>, hflip_prob: f64) -> Self {
        Preprocessor {
            pad_to,
            hflip_prob,
            mean: None,
            std: None,
        }
    }

    pub fn mean(&self) -> Option<&[f64]> {
        self.mean.as_deref()
    }

    pub fn std(&self) -> Option<&[f64]> {
        self.std.as_deref()
    }

    fn pad(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [n, h, w, c] = *images.shape() else {
            return Err(Error::shape(&[0, 0, 0, 0], images.shape()));
        };
        let Some(target) = self.pad_to else {
            return Ok(images.clone());
        };
        if target < h || target < w {
            return Err(Error::Config {
                field: "pad_to",
                message: format!("cannot pad {h}x{w} images down to {target}"),
            });
        }
        if target == h && target == w {
            return Ok(images.clone());
        }
        let (top, left) = ((target - h) / 2, (target - w) / 2);
        let mut out = vec![0.0f32; n * target * target * c];
        for b in 0..n {
            for i in 0..h {
                let src = ((b * h + i) * w) * c;
                let dst = ((b * target + i + top) * target + left) * c;
                out[dst..dst + w * c].copy_from_slice(&images.data()[src..src + w * c]);
            }
        }
        Tensor::from_vec(&[n, target, target, c], out)
    }

    /// Computes per-channel mean and standard deviation of the padded training images.
    pub fn fit(&mut self, train: &Dataset) -> Result<()> {
        let padded = self.pad(&train.images)?;
        let c = train.image_shape()[2];
        let count = (padded.len() / c) as f64;
        let mut mean = vec![0.0f64; c];
        for row in padded.data().chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0f64; c];
        for row in padded.data().chunks_exact(c) {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / count).sqrt()).collect();
        if let Some(k) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Consistency(format!("channel {k} has zero variance")));
        }
        self.mean = Some(mean);
        self.std = Some(std);
        Ok(())
    }

    /// Pads and standardizes every image of `ds`.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let (Some(mean), Some(std)) = (&self.mean, &self.std) else {
            return Err(Error::Unfitted);
        };
        let mut images = self.pad(&ds.images)?;
        let c = mean.len();
        if ds.image_shape()[2] != c {
            return Err(Error::shape(&[c], &[ds.image_shape()[2]]));
        }
        for row in images.data_mut().chunks_exact_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
        Dataset::new(images, ds.labels.clone(), ds.split, ds.class_count)
    }

    /// Flips each sample of `batch` horizontally with probability `hflip_prob`.
    pub fn augment_batch(&self, batch: &mut Tensor<f32>, seed: u64) -> Result<()> {
        if self.hflip_prob <= 0.0 {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch.shape()[0];
        for b in 0..n {
            if rng.gen_bool(self.hflip_prob.min(1.0)) {
                hflip_sample(batch, b)?;
            }
        }
        Ok(())
    }
}

/// Mirrors sample `index` of an `[N, H, W, C]` batch along the width axis.
pub fn hflip_sample(batch: &mut Tensor<f32>, index: usize) -> Result<()> {
    let [n, h, w, c] = *batch.shape() else {
        return Err(Error::shape(&[0, 0, 0, 0], batch.shape()));
    };
    if index >= n {
        return Err(Error::OutOfRange {
            what: "sample",
            index,
            limit: n,
        });
    }
    let data = batch.data_mut();
    for i in 0..h {
        let row = ((index * h + i) * w) * c;
        for j in 0..w / 2 {
            for k in 0..c {
                data.swap(row + j * c + k, row + (w - 1 - j) * c + k);
            }
        }
    }
    Ok(())
}

// ---- batching ---------------------------------------------------------------

/// One mini-batch.
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Shuffled mini-batches over a dataset; the last batch may be partial.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Batches<'a> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(
            self.ds
                .gather(idx)
                .map(|(images, labels)| Batch { images, labels }),
        )
    }
}

/// Deterministically shuffled batches. `None` keeps dataset order.
pub fn batches(ds: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Config {
            field: "batch_size",
            message: "must be at least 1".into(),
        });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

// ---- prepared splits -------------------------------------------------------

/// Preprocessed train / validation / test splits ready for training.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub preprocessor: Preprocessor,
}

impl Splits {
    /// Fits `preprocessor` on `train` and applies it to all three splits.
    pub fn prepare(train: Dataset, val: Dataset, test: Dataset, mut preprocessor: Preprocessor) -> Result<Self> {
        preprocessor.fit(&train)?;
        Ok(Splits {
            train: preprocessor.apply(&train)?,
            val: preprocessor.apply(&val)?,
            test: preprocessor.apply(&test)?,
            preprocessor,
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.train.image_shape()
    }

    pub fn class_count(&self) -> usize {
        self.train.class_count
    }

    /// MNIST padded to 32x32 with the last `MNIST_VALIDATION` training
    /// images held out. `train_limit` truncates the remaining training set.
    pub fn mnist(dir: &Path, hflip_prob: f64, train_limit: Option<usize>) -> Result<Self> {
        let (full, test) = load_mnist_dir(dir)?;
        let (train, val) = full.split_tail(MNIST_VALIDATION)?;
        let train = match train_limit {
            Some(n) if n < train.len() => train.take(n)?,
            _ => train,
        };
        Splits::prepare(train, val, test, Preprocessor::new(Some(SYNTH_SIZE), hflip_prob))
    }

    /// Independent synthetic train, validation and test sets from one seed.
    pub fn synthetic(train: usize, eval: usize, seed: u64, hflip_prob: f64) -> Result<Self> {
        let mut tr = synth_shapes(train, seed)?;
        tr.split = Split::Train;
        let mut val = synth_shapes(eval, seed.wrapping_add(1))?;
        val.split = Split::Validation;
        let mut test = synth_shapes(eval, seed.wrapping_add(2))?;
        test.split = Split::Test;
        Splits::prepare(tr, val, test, Preprocessor::new(None, hflip_prob))
    }
}
