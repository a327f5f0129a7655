//! Procedural shapes dataset and its `CVDS` file format.
//!
//! Layout (little-endian): magic `CVDS`, version `u16`, count `u32`,
//! channels `u16`, height `u16`, width `u16`, num_classes `u16`, then
//! `count * channels * height * width` pixel bytes and `count` `u16` labels.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, FormatCode, Result};
use crate::tensor::{Scalar, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"CVDS";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 18;

pub const SHAPE_NAMES: [&str; 4] = ["circle", "square", "cross", "stripes"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u16>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Samples `indices` as a `[B, C, H, W]` tensor scaled to `[0, 1]`, with their labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| T::of(p as f64 / 255.0)));
        }
        let x = Tensor::new([indices.len(), self.channels, self.height, self.width], data)
            .expect("batch size matches header");
        (x, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let cut = n * self.image_len();
        let part = |images: &[u8], labels: &[u16]| Dataset {
            images: images.to_vec(),
            labels: labels.to_vec(),
            ..self.clone_header()
        };
        (
            part(&self.images[..cut], &self.labels[..n]),
            part(&self.images[cut..], &self.labels[n..]),
        )
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.images.len() + 2 * self.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for v in [self.channels, self.height, self.width, self.num_classes] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        out.extend_from_slice(&self.images);
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
            return Err(Error::format(FormatCode::BadMagic, "not a CVDS dataset"));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(FormatCode::Truncated, "header is incomplete"));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
        let version = u16_at(4) as u16;
        if version != DATASET_VERSION {
            return Err(Error::format(
                FormatCode::UnsupportedVersion,
                format!("dataset version {version}, expected {DATASET_VERSION}"),
            ));
        }
        let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let (channels, height, width, num_classes) = (u16_at(10), u16_at(12), u16_at(14), u16_at(16));
        let pixels = count * channels * height * width;
        let expected = HEADER_LEN + pixels + 2 * count;
        if bytes.len() < expected {
            return Err(Error::format(
                FormatCode::Truncated,
                format!("{} bytes, header implies {expected}", bytes.len()),
            ));
        }
        if bytes.len() > expected {
            return Err(Error::format(
                FormatCode::Malformed,
                format!("{} trailing bytes", bytes.len() - expected),
            ));
        }
        let images = bytes[HEADER_LEN..HEADER_LEN + pixels].to_vec();
        let labels: Vec<u16> = bytes[HEADER_LEN + pixels..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::format(
                FormatCode::Malformed,
                format!("label {bad} out of range for {num_classes} classes"),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            num_classes,
            images,
            labels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Renders one grayscale shape into `img` (row-major `size x size`).
fn render(class: usize, size: usize, rng: &mut ChaCha8Rng, img: &mut [f64]) {
    let s = size as f64;
    let jitter = s / 8.0;
    let cy = s / 2.0 + rng.random_range(-jitter..jitter);
    let cx = s / 2.0 + rng.random_range(-jitter..jitter);
    let r = s * rng.random_range(0.2..0.32);
    let fg = rng.random_range(0.7..1.0);
    let thick = (r * rng.random_range(0.3..0.45)).max(1.5);
    let period = rng.random_range(3.0..5.0_f64).max(s / 10.0);
    let vertical = rng.random_bool(0.5);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let inside = match class {
                0 => dy * dy + dx * dx <= r * r,
                1 => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
                2 => (dy.abs() <= thick / 2.0 && dx.abs() <= r) || (dx.abs() <= thick / 2.0 && dy.abs() <= r),
                _ => {
                    let t = if vertical { x as f64 } else { y as f64 };
                    dy.abs() <= r && dx.abs() <= r && (t / period).fract() < 0.5
                }
            };
            if inside {
                img[y * size + x] = fg;
            }
        }
    }
}

/// Balanced, seeded dataset of circles, squares, crosses and stripes.
///
/// `n` is truncated to a multiple of `num_classes` (with a warning).
pub fn generate_shapes_dataset(n: usize, size: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if size < 16 {
        return Err(Error::Config(format!("image size must be at least 16, got {size}")));
    }
    if !(2..=SHAPE_NAMES.len()).contains(&num_classes) {
        return Err(Error::Config(format!("num_classes must be in 2..=4, got {num_classes}")));
    }
    let count = n - n % num_classes;
    if count != n {
        log::warn!("{n} samples is not divisible by {num_classes} classes; generating {count}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u16> = (0..count).map(|i| (i % num_classes) as u16).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, 0.06).expect("positive std");
    let plane = size * size;
    let mut images = Vec::with_capacity(count * 3 * plane);
    let mut img = vec![0.0; plane];
    for &label in &labels {
        let bg = rng.random_range(0.0..0.3);
        img.iter_mut().for_each(|v| *v = bg);
        render(label as usize, size, &mut rng, &mut img);
        let gray: Vec<u8> = img
            .iter()
            .map(|&v| ((v + noise.sample(&mut rng)).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        for _ in 0..3 {
            images.extend_from_slice(&gray);
        }
    }
    Ok(Dataset {
        channels: 3,
        height: size,
        width: size,
        num_classes,
        images,
        labels,
    })
}

/// Accuracy of a k-nearest-neighbour classifier on raw pixels (squared L2, majority vote,
/// ties broken towards the nearer neighbour).
pub fn knn_accuracy(train: &Dataset, test: &Dataset, k: usize) -> f64 {
    let mut correct = 0;
    for t in 0..test.len() {
        let q = test.image(t);
        let mut dists: Vec<(u64, usize)> = (0..train.len())
            .map(|i| {
                let d = train
                    .image(i)
                    .iter()
                    .zip(q)
                    .map(|(&a, &b)| {
                        let d = a as i64 - b as i64;
                        (d * d) as u64
                    })
                    .sum();
                (d, i)
            })
            .collect();
        dists.sort_unstable();
        let mut votes = vec![0usize; train.num_classes];
        for &(_, i) in dists.iter().take(k) {
            votes[train.labels[i] as usize] += 1;
        }
        let best = votes.iter().copied().max().unwrap_or(0);
        let pred = dists
            .iter()
            .take(k)
            .map(|&(_, i)| train.labels[i] as usize)
            .find(|&l| votes[l] == best)
            .unwrap_or(0);
        if pred == test.labels[t] as usize {
            correct += 1;
        }
    }
    correct as f64 / test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = generate_shapes_dataset(400, 32, 4, 7).unwrap();
        let b = generate_shapes_dataset(400, 32, 4, 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.histogram(), [100, 100, 100, 100]);
        assert_ne!(a.to_bytes(), generate_shapes_dataset(400, 32, 4, 8).unwrap().to_bytes());
    }

    #[test]
    fn truncates_to_balanced_count() {
        let d = generate_shapes_dataset(402, 16, 4, 1).unwrap();
        assert_eq!(d.len(), 400);
        assert!(generate_shapes_dataset(10, 8, 4, 1).is_err());
        assert!(generate_shapes_dataset(10, 16, 5, 1).is_err());
    }

    #[test]
    fn byte_round_trip_and_rejections() {
        let d = generate_shapes_dataset(8, 16, 4, 2).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(bytes.len(), 18 + 8 * 3 * 256 + 16);
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), d);
        let code = |b: &[u8]| Dataset::from_bytes(b).unwrap_err().format_code().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(code(&bad), FormatCode::BadMagic);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(code(&bad), FormatCode::UnsupportedVersion);
        assert_eq!(code(&bytes[..bytes.len() - 1]), FormatCode::Truncated);
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 2] = 7;
        assert_eq!(code(&bad), FormatCode::Malformed);
    }

    #[test]
    fn nearest_neighbour_baseline_learns_the_shapes() {
        let d = generate_shapes_dataset(1000, 32, 4, 11).unwrap();
        let (train, test) = d.split(800);
        let acc = knn_accuracy(&train, &test, 5);
        assert!(acc >= 0.70, "5-NN accuracy {acc}");
    }
}
