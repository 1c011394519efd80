//! Procedural class-conditional image data.
//!
//! Class `k` draws shape `k mod 4` (disk, square, ring, cross) in palette
//! colour `⌊k / 4⌋ + k mod 4` on a dark background, with seeded jitter in
//! position and scale.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{AnyTensor, Container};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const PALETTE: [[f32; 3]; 6] = [
    [1.0, -0.6, -0.6],
    [-0.6, 1.0, -0.6],
    [-0.6, -0.6, 1.0],
    [1.0, 1.0, -0.8],
    [-0.8, 1.0, 1.0],
    [1.0, -0.8, 1.0],
];
const SHAPES: usize = 4;
pub const MAX_CLASSES: usize = SHAPES * PALETTE.len();
const BACKGROUND: f32 = -0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: String,
    pub num_classes: usize,
    pub image_size: usize,
    pub n_per_class: usize,
    pub seed: u64,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(N, 3, S, S)` in `[−1, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub image_size: usize,
    pub n_per_class: usize,
    pub seed: u64,
}

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let d = (dx * dx + dy * dy).sqrt();
    match shape {
        0 => d <= r,
        1 => ax <= r * 0.85 && ay <= r * 0.85,
        2 => d <= r && d >= r * 0.55,
        _ => (ax <= r * 0.3 && ay <= r) || (ay <= r * 0.3 && ax <= r),
    }
}

/// `n_per_class` images for each of `num_classes` classes, ordered by class.
pub fn synth_dataset(seed: u64, num_classes: usize, image_size: usize, n_per_class: usize) -> Result<Dataset> {
    if !(2..=MAX_CLASSES).contains(&num_classes) {
        return Err(Error::Config(format!(
            "num_classes must lie in [2, {MAX_CLASSES}], got {num_classes}"
        )));
    }
    if image_size != 16 && image_size != 32 {
        return Err(Error::Config(format!("image size must be 16 or 32, got {image_size}")));
    }
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    let s = image_size;
    let sf = s as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * n_per_class;
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for k in 0..num_classes {
        let shape = k % SHAPES;
        let color = PALETTE[(k / SHAPES + k % SHAPES) % PALETTE.len()];
        for _ in 0..n_per_class {
            let cx = sf / 2.0 + rng.random_range(-sf / 8.0..=sf / 8.0);
            let cy = sf / 2.0 + rng.random_range(-sf / 8.0..=sf / 8.0);
            let r = sf * 0.3 * rng.random_range(0.8f32..=1.2);
            let mut img = vec![BACKGROUND; 3 * s * s];
            for y in 0..s {
                for x in 0..s {
                    if inside(shape, x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r) {
                        for (c, &v) in color.iter().enumerate() {
                            img[(c * s + y) * s + x] = v;
                        }
                    }
                }
            }
            data.extend(img);
            labels.push(k);
        }
    }
    Ok(Dataset {
        images: Tensor::new([n, 3, s, s], data)?,
        labels,
        num_classes,
        image_size,
        n_per_class,
        seed,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels at `indices`, cast to `T`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let images = self.images.select(0, indices)?.cast();
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Mean image per class, each `(3, S, S)` flattened.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let per = 3 * self.image_size * self.image_size;
        let mut sums = vec![vec![0.0; per]; self.num_classes];
        let mut counts = vec![0usize; self.num_classes];
        for (img, &k) in self.images.data().chunks(per).zip(&self.labels) {
            counts[k] += 1;
            for (s, &v) in sums[k].iter_mut().zip(img) {
                *s += v as f64;
            }
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
        }
        sums
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            kind: "dataset".into(),
            num_classes: self.num_classes,
            image_size: self.image_size,
            n_per_class: self.n_per_class,
            seed: self.seed,
            labels: self.labels.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::new(&self.meta())?;
        c.push("images", AnyTensor::F32(self.images.clone()))?;
        c.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::load(path)?;
        let meta: DatasetMeta = c.meta()?;
        if meta.kind != "dataset" {
            return Err(Error::Malformed(format!(
                "expected a dataset file, found `{}`",
                meta.kind
            )));
        }
        let images: Tensor<f32> = c.get("images")?.to();
        let s = meta.image_size;
        if images.shape() != [meta.labels.len(), 3, s, s] {
            return Err(Error::Malformed(format!(
                "dataset images have shape {:?}",
                images.shape()
            )));
        }
        if let Some(&bad) = meta.labels.iter().find(|&&l| l >= meta.num_classes) {
            return Err(Error::ClassOutOfRange {
                index: bad,
                num_classes: meta.num_classes,
            });
        }
        Ok(Self {
            images,
            labels: meta.labels,
            num_classes: meta.num_classes,
            image_size: s,
            n_per_class: meta.n_per_class,
            seed: meta.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_dataset(4, 8, 16, 3).unwrap();
        let b = synth_dataset(4, 8, 16, 3).unwrap();
        assert_eq!(a, b);
        for k in 0..8 {
            assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 3);
        }
        assert!(a.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(a, synth_dataset(5, 8, 16, 3).unwrap());
    }

    #[test]
    fn class_means_pairwise_distinct() {
        let d = synth_dataset(0, 12, 32, 8).unwrap();
        let means = d.class_means();
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let dist: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 0.1, "classes {i} and {j}: {dist}");
            }
        }
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(synth_dataset(0, 1, 16, 1).is_err());
        assert!(synth_dataset(0, 4, 24, 1).is_err());
        assert!(synth_dataset(0, 4, 16, 0).is_err());
        assert!(synth_dataset(0, MAX_CLASSES + 1, 16, 1).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.ppcd");
        let d = synth_dataset(1, 3, 16, 2).unwrap();
        d.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), d);
    }
}
