//! Dataset ingestion, normalization, validation split and batching.
//!
//! File formats:
//! * IDX (MNIST / Fashion-MNIST): big-endian magic `0x00000803` (images) or
//!   `0x00000801` (labels), big-endian `u32` dimension sizes, raw `u8` data.
//! * CIFAR-10 binary: 3073-byte records, one label byte followed by
//!   3 x 1024 channel-planar pixel bytes.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

/// Images `(N, C, H, W)` with one class id per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::invalid("dataset images must be (N, C, H, W)"));
        }
        if images.rows() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.rows(),
                labels: labels.len(),
            }
            .into());
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(DataError::BadLabel {
                index,
                label,
                classes: class_count,
            }
            .into());
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape `(C, H, W)`.
    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels of `indices`, in the given order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let w = self.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.example_shape());
        let images = Tensor::new(shape, data).expect("consistent gather");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (images, labels) = self.gather(indices);
        Self {
            images,
            labels,
            class_count: self.class_count,
        }
    }

    /// First `n` examples (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Consecutive, unshuffled chunks for evaluation.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = (Tensor<T>, Vec<usize>)> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(self.len())).collect();
            self.gather(&idx)
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| {
            DataError::Truncated {
                path: path.to_path_buf(),
                expected: offset + 4,
                found: bytes.len(),
            }
            .into()
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        }
        .into());
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize, path: &Path) -> Result<()> {
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        }
        .into());
    }
    Ok(())
}

/// Load an IDX image/label file pair; pixels are scaled to `[0, 1]`.
/// The class count is 10, or `max label + 1` if larger.
pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<T>> {
    let img = read_file(images_path)?;
    check_magic(&img, IDX_IMAGES_MAGIC, images_path)?;
    let n = be_u32(&img, 4, images_path)? as usize;
    let h = be_u32(&img, 8, images_path)? as usize;
    let w = be_u32(&img, 12, images_path)? as usize;
    check_len(&img, 16 + n * h * w, images_path)?;

    let lab = read_file(labels_path)?;
    check_magic(&lab, IDX_LABELS_MAGIC, labels_path)?;
    let nl = be_u32(&lab, 4, labels_path)? as usize;
    check_len(&lab, 8 + nl, labels_path)?;
    if nl != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: nl,
        }
        .into());
    }

    let scale = T::one() / T::from_f64_lossy(255.0);
    let pixels = img[16..16 + n * h * w]
        .iter()
        .map(|&b| T::from_u8(b).expect("u8 fits") * scale)
        .collect();
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().map(|&l| l + 1).max().unwrap_or(0).max(10);
    Dataset::new(Tensor::new(vec![n, 1, h, w], pixels)?, labels, class_count)
}

/// Load and concatenate CIFAR-10 binary batch files.
pub fn load_cifar10_bin<T: Scalar, P: AsRef<Path>>(paths: &[P]) -> Result<Dataset<T>> {
    let scale = T::one() / T::from_f64_lossy(255.0);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::BadLength {
                path: path.to_path_buf(),
                len: bytes.len(),
                record: CIFAR_RECORD,
            }
            .into());
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(DataError::BadLabel {
                    index: labels.len(),
                    label,
                    classes: 10,
                }
                .into());
            }
            labels.push(label);
            pixels.extend(rec[1..].iter().map(|&b| T::from_u8(b).expect("u8 fits") * scale));
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10)
}

/// IDX encoders, used to write fixtures and subsets.
pub mod idx {
    use super::{IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};

    pub fn encode_images(pixels: &[u8], n: usize, h: usize, w: usize) -> Vec<u8> {
        assert_eq!(pixels.len(), n * h * w, "pixel count");
        let mut out = Vec::with_capacity(16 + pixels.len());
        for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(pixels);
        out
    }

    pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + labels.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Channel statistics of `d` (population standard deviation).
    pub fn fit<T: Scalar>(d: &Dataset<T>) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::invalid("cannot fit normalization on an empty dataset"));
        }
        let shape = d.example_shape();
        let (c, plane) = (shape[0], shape[1] * shape[2]);
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..d.len() {
            let row = d.images.row(i);
            for ch in 0..c {
                for &v in &row[ch * plane..(ch + 1) * plane] {
                    let v = v.to_f64_lossy();
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (d.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / count - m * m).max(0.0);
                if var > 1e-16 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply<T: Scalar>(&self, d: &mut Dataset<T>) -> Result<()> {
        let shape = d.example_shape().to_vec();
        if shape[0] != self.mean.len() {
            return Err(Error::shape("normalizer channels", &[self.mean.len()], &[shape[0]]));
        }
        let plane = shape[1] * shape[2];
        let coeffs: Vec<(T, T)> = self
            .mean
            .iter()
            .zip(&self.std)
            .map(|(&m, &s)| (T::from_f64_lossy(m), T::from_f64_lossy(1.0 / s)))
            .collect();
        for i in 0..d.len() {
            let row = d.images.row_mut(i);
            for (ch, &(m, inv)) in coeffs.iter().enumerate() {
                for v in &mut row[ch * plane..(ch + 1) * plane] {
                    *v = (*v - m) * inv;
                }
            }
        }
        Ok(())
    }
}

/// Disjoint train / validation partition carved from one training set.
#[derive(Debug, Clone)]
pub struct ValidationSplit<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub seed: u64,
    /// Original indices of the validation examples, ascending.
    pub val_indices: Vec<usize>,
}

/// Random `n`-example validation split; the rest (original order) trains.
pub fn split_validation<T: Scalar>(d: &Dataset<T>, n: usize, seed: u64) -> Result<ValidationSplit<T>> {
    if n == 0 || n >= d.len() {
        return Err(Error::invalid(format!(
            "validation size {n} must be in (0, {})",
            d.len()
        )));
    }
    let perm = permutation(d.len(), derive_seed(seed, stream::SPLIT));
    let mut in_val = vec![false; d.len()];
    for &i in &perm[..n] {
        in_val[i] = true;
    }
    let val_indices: Vec<usize> = (0..d.len()).filter(|&i| in_val[i]).collect();
    let train_indices: Vec<usize> = (0..d.len()).filter(|&i| !in_val[i]).collect();
    Ok(ValidationSplit {
        train: d.subset(&train_indices),
        val: d.subset(&val_indices),
        seed,
        val_indices,
    })
}

/// Seeded permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    idx
}

/// One minibatch, with the dataset indices it was drawn from.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Shuffled minibatches covering every example exactly once; the last
/// batch may be short.
pub struct BatchIter<'a, T> {
    data: &'a Dataset<T>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (images, labels) = self.data.gather(&indices);
        Some(Batch {
            indices,
            images,
            labels,
        })
    }
}

pub fn batch_iter<T: Scalar>(d: &Dataset<T>, batch_size: usize, epoch_seed: u64) -> BatchIter<'_, T> {
    BatchIter {
        data: d,
        order: permutation(d.len(), derive_seed(epoch_seed, stream::SHUFFLE)),
        batch_size: batch_size.max(1),
        pos: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn toy(n: usize) -> Dataset<f32> {
        let images = Tensor::from_fn(&[n, 1, 2, 2], |i| (i % 7) as f32 / 7.0);
        Dataset::new(images, (0..n).map(|i| i % 10).collect(), 10).unwrap()
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let pix: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 17 % 256) as u8).collect();
        let ip = write(dir.path(), "img", &idx::encode_images(&pix, 3, 4, 5));
        let lp = write(dir.path(), "lab", &idx::encode_labels(&[1, 0, 9]));
        let d: Dataset<f32> = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.images.shape(), &[3, 1, 4, 5]);
        assert_eq!(d.labels, vec![1, 0, 9]);
        assert!(d.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d.images.data()[1], 17.0 / 255.0);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let pix = vec![0u8; 2 * 2 * 2];
        let good_img = idx::encode_images(&pix, 2, 2, 2);
        let good_lab = idx::encode_labels(&[0, 1]);

        let mut bad = good_img.clone();
        bad[3] = 0x02;
        let ip = write(dir.path(), "bad", &bad);
        let lp = write(dir.path(), "lab", &good_lab);
        let err = load_idx::<f32>(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Data(DataError::BadMagic { .. })), "{err}");
        assert!(err.to_string().contains("bad magic"));

        let ip = write(dir.path(), "short", &good_img[..good_img.len() - 1]);
        let err = load_idx::<f32>(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Data(DataError::Truncated { .. })), "{err}");

        let ip = write(dir.path(), "img", &good_img);
        let lp = write(dir.path(), "lab3", &idx::encode_labels(&[0, 1, 2]));
        let err = load_idx::<f32>(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Data(DataError::CountMismatch { .. })), "{err}");
    }

    #[test]
    fn cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for label in [3u8, 7] {
            bytes.push(label);
            bytes.extend((0..3072).map(|i| (i % 256) as u8));
        }
        let p = write(dir.path(), "b1", &bytes);
        let d: Dataset<f32> = load_cifar10_bin(&[&p]).unwrap();
        assert_eq!(d.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(d.labels, vec![3, 7]);

        let empty = write(dir.path(), "empty", &[]);
        let d: Dataset<f32> = load_cifar10_bin(&[&empty]).unwrap();
        assert_eq!(d.len(), 0);

        let odd = write(dir.path(), "odd", &bytes[..3000]);
        assert!(matches!(
            load_cifar10_bin::<f32, _>(&[&odd]).unwrap_err(),
            Error::Data(DataError::BadLength { .. })
        ));

        bytes[0] = 10;
        let bad = write(dir.path(), "bad", &bytes);
        let err = load_cifar10_bin::<f32, _>(&[&bad]).unwrap_err();
        assert!(matches!(err, Error::Data(DataError::BadLabel { label: 10, .. })));
        assert!(err.to_string().contains("bad label"));
    }

    #[test]
    fn split_edges_and_determinism() {
        let d = toy(100);
        let s = split_validation(&d, 99, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (1, 99));
        assert!(split_validation(&d, 0, 3).is_err());
        assert!(split_validation(&d, 100, 3).is_err());

        let a = split_validation(&d, 30, 5).unwrap();
        let b = split_validation(&d, 30, 5).unwrap();
        assert_eq!(a.val_indices, b.val_indices);
        assert_eq!(a.train, b.train);

        for seed in 0..10u64 {
            let x = split_validation(&d, 30, seed).unwrap().val_indices;
            let y = split_validation(&d, 30, seed + 100).unwrap().val_indices;
            assert_ne!(x, y);
        }
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let mut d = toy(50);
        // Tag every image with its index in the first pixel.
        for i in 0..50 {
            d.images.row_mut(i)[0] = i as f32;
        }
        let s = split_validation(&d, 12, 1).unwrap();
        let mut seen: Vec<usize> = (0..s.train.len())
            .map(|i| s.train.images.row(i)[0] as usize)
            .chain((0..s.val.len()).map(|i| s.val.images.row(i)[0] as usize))
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn batches_cover_every_example_once() {
        let d = toy(23);
        let all: Vec<Batch<f32>> = batch_iter(&d, 5, 9).collect();
        assert_eq!(all.len(), 5);
        assert_eq!(all.last().unwrap().indices.len(), 3);
        let set: BTreeSet<usize> = all.iter().flat_map(|b| b.indices.clone()).collect();
        assert_eq!(set.len(), 23);
        let again: Vec<Vec<usize>> = batch_iter(&d, 5, 9).map(|b| b.indices).collect();
        assert_eq!(again, all.iter().map(|b| b.indices.clone()).collect::<Vec<_>>());

        let one: Vec<_> = batch_iter(&d, 100, 1).collect();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].indices.len(), 23);
    }

    #[test]
    fn normalization_centers_channels() {
        let images = Tensor::from_fn(&[40, 3, 4, 4], |i| ((i * 37) % 101) as f32 / 101.0 + (i % 3) as f32);
        let mut d = Dataset::new(images, vec![0; 40], 10).unwrap();
        let norm = Normalizer::fit(&d).unwrap();
        norm.apply(&mut d).unwrap();
        let refit = Normalizer::fit(&d).unwrap();
        for c in 0..3 {
            assert!(refit.mean[c].abs() < 0.05);
            assert!((refit.std[c] - 1.0).abs() < 0.05);
        }
    }
}
