//! Labeled image sets, deterministic sampling, and a procedural
//! 10-class image generator.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, normalized.
    pub images: Tensor,
    pub labels: Vec<u32>,
    /// Where the data came from, e.g. `"cifar10"` or `"raw"`.
    pub source: String,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u32>, source: impl Into<String>, num_classes: usize) -> Result<Self> {
        let (n, ..) = images.nchw()?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                dim: "label count",
                expected: n,
                got: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            images,
            labels,
            source: source.into(),
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            source: self.source.clone(),
            num_classes: self.num_classes,
        })
    }

    /// First `n` samples and the remainder.
    pub fn split(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "split point {n} must lie inside (0, {})",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    /// `n` distinct samples chosen by `seed`, kept in dataset order.
    pub fn sample_calibration(&self, n: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "calibration size {n} must lie in [1, {}]",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        self.subset(&idx)
    }
}

/// Per-channel normalization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const CIFAR10: Self = Self {
        mean: [0.4914, 0.4822, 0.4465],
        std: [0.2470, 0.2435, 0.2616],
    };

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("normalization std must be positive".into()));
        }
        Ok(())
    }

    /// Normalizes one planar `[3, H*W]` byte image.
    pub fn apply(&self, pixels: &[u8], out: &mut Vec<f32>) {
        let plane = pixels.len() / 3;
        for (i, &p) in pixels.iter().enumerate() {
            let c = i / plane;
            out.push((p as f32 / 255.0 - self.mean[c]) / self.std[c]);
        }
    }
}

pub const SYNTH_CLASSES: usize = 10;
pub const SYNTH_SIDE: usize = 32;

/// Procedural 32×32 RGB images in planar byte layout.
///
/// A class fixes a grating orientation (one of five) and a colour family
/// (warm or cool). Each image draws frequency, phase, contrast, tint,
/// a distractor disc and pixel noise at random.
pub fn synth_images(count: usize, seed: u64) -> (Vec<u8>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.12).expect("valid std");
    let side = SYNTH_SIDE;
    let mut pixels = Vec::with_capacity(count * 3 * side * side);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.random_range(0..SYNTH_CLASSES as u32);
        let orient = (label % 5) as f32;
        let warm = label >= 5;
        let theta = orient * core::f32::consts::PI / 5.0 + rng.random_range(-0.12..0.12);
        let (sn, cs) = (libm::sinf(theta), libm::cosf(theta));
        let freq = rng.random_range(0.35f32..0.75);
        let phase = rng.random_range(0.0..core::f32::consts::TAU);
        let contrast = rng.random_range(0.15f32..0.45);
        let base: [f32; 3] = if warm {
            [rng.random_range(0.55..0.85), rng.random_range(0.3..0.6), rng.random_range(0.1..0.4)]
        } else {
            [rng.random_range(0.1..0.4), rng.random_range(0.3..0.6), rng.random_range(0.55..0.85)]
        };
        let disc_colour: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let (dx, dy) = (rng.random_range(0.0..side as f32), rng.random_range(0.0..side as f32));
        let radius = rng.random_range(3.0f32..8.0);
        let mut img = [0u8; 3 * SYNTH_SIDE * SYNTH_SIDE];
        for y in 0..side {
            for x in 0..side {
                let (fx, fy) = (x as f32, y as f32);
                let wave = libm::sinf(freq * (fx * cs + fy * sn) + phase);
                let in_disc = (fx - dx) * (fx - dx) + (fy - dy) * (fy - dy) < radius * radius;
                for c in 0..3 {
                    let mut v = if in_disc {
                        disc_colour[c]
                    } else {
                        base[c] + contrast * wave
                    };
                    v += noise.sample(&mut rng);
                    img[c * side * side + y * side + x] = (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8;
                }
            }
        }
        pixels.extend_from_slice(&img);
        labels.push(label);
    }
    (pixels, labels)
}

/// Builds a dataset from planar byte images.
pub fn from_bytes(pixels: &[u8], labels: Vec<u32>, side: usize, norm: &Normalization, source: &str, classes: usize) -> Result<Dataset> {
    norm.validate()?;
    let per = 3 * side * side;
    if pixels.len() != labels.len() * per || labels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} pixel bytes do not hold {} images of {per} bytes",
            pixels.len(),
            labels.len()
        )));
    }
    let mut data = Vec::with_capacity(pixels.len());
    for img in pixels.chunks(per) {
        norm.apply(img, &mut data);
    }
    Dataset::new(Tensor::new(&[labels.len(), 3, side, side], data)?, labels, source, classes)
}

/// Normalized procedural dataset.
pub fn synth_dataset(count: usize, seed: u64) -> Result<Dataset> {
    let (pixels, labels) = synth_images(count, seed);
    from_bytes(&pixels, labels, SYNTH_SIDE, &Normalization::CIFAR10, "synthetic", SYNTH_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_sample_is_identity() {
        let d = synth_dataset(20, 1).unwrap();
        assert_eq!(d.sample_calibration(20, 7).unwrap(), d);
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = synth_dataset(50, 1).unwrap();
        let a = d.sample_calibration(10, 3).unwrap();
        let b = d.sample_calibration(10, 3).unwrap();
        let c = d.sample_calibration(10, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn white_pixel_normalization() {
        let n = Normalization::CIFAR10;
        let d = from_bytes(&[255u8; 3 * 4], alloc::vec![3], 2, &n, "t", 10).unwrap();
        for c in 0..3 {
            for v in &d.images.data()[c * 4..(c + 1) * 4] {
                assert!((v - (1.0 - n.mean[c]) / n.std[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn labels_checked() {
        let t = Tensor::zeros(&[1, 3, 2, 2]).unwrap();
        assert!(Dataset::new(t, alloc::vec![10], "t", 10).is_err());
    }

    #[test]
    fn generator_is_deterministic() {
        assert_eq!(synth_images(5, 9), synth_images(5, 9));
        let (_, labels) = synth_images(500, 2);
        for c in 0..SYNTH_CLASSES as u32 {
            assert!(labels.contains(&c));
        }
    }
}
