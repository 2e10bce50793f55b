use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Bytes per CIFAR-10 binary record: one label, then 32·32 R, G and B planes.
pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;
const CIFAR_TRAIN: [&str; 5] = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
const CIFAR_TEST: &str = "test_batch.bin";

/// Labelled RGB images stored as `(N, C, H, W)` 32-bit values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
}

/// One minibatch in the working precision.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape().get(2).copied().unwrap_or(0)
    }

    fn image_numel(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        Dataset {
            images: Tensor::new(shape, self.images.data()[..n * self.image_numel()].to_vec()).expect("prefix"),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Examples at `idx`, optionally mirrored left-right per example.
    pub fn batch<T: Scalar>(&self, idx: &[usize], flips: Option<&[bool]>) -> Batch<T> {
        let per = self.image_numel();
        let w = self.image_size();
        let mut data = Vec::with_capacity(idx.len() * per);
        for (k, &i) in idx.iter().enumerate() {
            let img = &self.images.data()[i * per..(i + 1) * per];
            if flips.is_some_and(|f| f[k]) {
                for row in img.chunks(w) {
                    data.extend(row.iter().rev().map(|&v| T::of(v as f64)));
                }
            } else {
                data.extend(img.iter().map(|&v| T::of(v as f64)));
            }
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Batch {
            images: Tensor::new(shape, data).expect("batch extents"),
            labels: idx.iter().map(|&i| self.labels[i] as usize).collect(),
        }
    }

    /// Deterministic permutation of the examples for `epoch`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1b5_4a32_d192_ed03);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_stats(&self) -> Standardization {
        let [n, c, h, w] = *self.images.shape() else { return Standardization::identity(0) };
        let plane = h * w;
        let mut mean = vec![0.0f64; c];
        let mut std = vec![0.0f64; c];
        for ci in 0..c {
            let vals = (0..n).flat_map(|i| self.images.data()[(i * c + ci) * plane..(i * c + ci + 1) * plane].iter());
            let count = (n * plane) as f64;
            let m = vals.clone().map(|&v| v as f64).sum::<f64>() / count;
            let var = vals.map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / count;
            mean[ci] = m;
            std[ci] = var.sqrt();
        }
        Standardization { mean, std }
    }

    /// `(x - mean_c) / std_c` in place.
    pub fn standardize(&mut self, s: &Standardization) {
        let [_, c, h, w] = *self.images.shape() else { return };
        let plane = h * w;
        for (k, v) in self.images.data_mut().iter_mut().enumerate() {
            let ci = (k / plane) % c;
            let sd = if s.std[ci] > 0.0 { s.std[ci] } else { 1.0 };
            *v = ((*v as f64 - s.mean[ci]) / sd) as f32;
        }
    }
}

/// Per-channel constants applied to every split, computed on the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }
}

/// Parses one CIFAR-10 binary batch file; pixels scaled to `[0, 1]`.
pub fn read_cifar_batch(path: &Path) -> Result<Dataset> {
    let err = |reason: String| Error::Dataset { path: path.to_path_buf(), reason };
    let bytes = fs::read(path).map_err(|e| err(format!("cannot read: {e}")))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        let expected = bytes.len().div_ceil(CIFAR_RECORD).max(1) * CIFAR_RECORD;
        return Err(err(format!(
            "size {} bytes is not a positive multiple of the {CIFAR_RECORD}-byte record (expected e.g. {expected})",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(err(format!("record {i} has label byte {} (> 9)", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Dataset { images: Tensor::new([n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?, labels })
}

/// Train and test splits, standardized with train-split constants.
#[derive(Debug, Clone)]
pub struct Cifar10 {
    pub train: Dataset,
    pub test: Dataset,
    pub standardization: Standardization,
}

fn concat_datasets(parts: Vec<Dataset>) -> Result<Dataset> {
    let refs: Vec<&Tensor<f32>> = parts.iter().map(|d| &d.images).collect();
    let images = Tensor::concat(&refs, 0)?;
    Ok(Dataset { images, labels: parts.into_iter().flat_map(|d| d.labels).collect() })
}

/// Reads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Cifar10> {
    let path = |f: &str| -> PathBuf { dir.join(f) };
    let train = concat_datasets(CIFAR_TRAIN.iter().map(|f| read_cifar_batch(&path(f))).collect::<Result<_>>()?)?;
    let test = read_cifar_batch(&path(CIFAR_TEST))?;
    standardized(train, test)
}

/// Standardizes both splits with constants from `train`.
pub fn standardized(mut train: Dataset, mut test: Dataset) -> Result<Cifar10> {
    let standardization = train.channel_stats();
    train.standardize(&standardization);
    test.standardize(&standardization);
    Ok(Cifar10 { train, test, standardization })
}

/// `n` RGB images of parametric shapes; the class is the shape type.
/// Labels are balanced (`i mod 10`) and shuffled; everything is a pure
/// function of `(n, size, seed)`.
pub fn synthetic_dataset(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || size < 4 {
        return Err(Error::invalid(format!("synthetic dataset needs n >= 1 and size >= 4, got n={n}, size={size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    labels.shuffle(&mut rng);
    let plane = size * size;
    let mut data = vec![0.0f32; n * 3 * plane];
    for (i, &label) in labels.iter().enumerate() {
        let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.2));
        let fg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
        let jitter = 2.0 / size as f64;
        let (cx, cy) = (rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter));
        let r = rng.random_range(0.55..0.75);
        let img = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for py in 0..size {
            for px in 0..size {
                let u = (2.0 * (px as f64 + 0.5) / size as f64 - 1.0) - cx;
                let v = (2.0 * (py as f64 + 0.5) / size as f64 - 1.0) - cy;
                let on = shape_contains(label, u, v, r);
                let noise = rng.random_range(-0.03f32..0.03);
                for c in 0..3 {
                    img[c * plane + py * size + px] = (if on { fg[c] } else { bg[c] } + noise).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(Dataset { images: Tensor::new([n, 3, size, size], data)?, labels })
}

fn shape_contains(label: u8, u: f64, v: f64, r: f64) -> bool {
    let t = 0.28;
    let (au, av) = (u.abs(), v.abs());
    let inside = au.max(av) < r;
    let rad = u.hypot(v);
    match label {
        0 => inside,
        1 => inside && au.max(av) > r - t,
        2 => rad < r,
        3 => rad < r && rad > r - t,
        4 => av < t / 2.0 + 0.05 && au < r,
        5 => au < t / 2.0 + 0.05 && av < r,
        6 => (u - v).abs() < t && inside,
        7 => (u + v).abs() < t && inside,
        8 => (au < t / 2.0 + 0.05 || av < t / 2.0 + 0.05) && inside,
        _ => v > -r && v < r && au < (v + r) / 2.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic_dataset(1000, 8, 4).unwrap();
        let b = synthetic_dataset(1000, 8, 4).unwrap();
        assert_eq!(a, b);
        let mut hist = [0usize; 10];
        a.labels.iter().for_each(|&l| hist[l as usize] += 1);
        assert!(hist.iter().all(|&h| h.abs_diff(100) <= 5), "{hist:?}");
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let d = synthetic_dataset(50, 8, 1).unwrap();
        let mut o = d.epoch_order(3, 2);
        assert_eq!(o, d.epoch_order(3, 2));
        assert_ne!(o, d.epoch_order(3, 3));
        o.sort_unstable();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn flip_mirrors_rows() {
        let d = synthetic_dataset(2, 8, 1).unwrap();
        let plain: Batch<f32> = d.batch(&[0], None);
        let flipped: Batch<f32> = d.batch(&[0], Some(&[true]));
        assert_eq!(plain.images.at(&[0, 1, 2, 0]), flipped.images.at(&[0, 1, 2, 7]));
    }
}
