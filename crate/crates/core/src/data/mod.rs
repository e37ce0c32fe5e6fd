//! Deterministic synthetic tasks, the `MEATDAT1` container and batching.

mod batch;
mod container;
mod family;

pub use batch::{batch_iter, epoch_order, Batch, BatchIter};
pub use container::{load_raw_dataset, MAGIC as DATASET_MAGIC, HEADER_BYTES as DATASET_HEADER_BYTES};
pub use family::{generate_task, FamilyKind, Palette, ShiftParams, TaskFamily};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Generated(TaskFamily),
    /// SHA-256 of the container file.
    File([u8; 32]),
}

/// Labelled images `N × C × H × W`, pixels in `[0, 1]` until normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pixels: Vec<f64>,
    shape: [usize; 4],
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    provenance: Provenance,
    normalized: bool,
}

/// Per-channel statistics used to normalize every task.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        provenance: Provenance,
    ) -> Result<Self> {
        let &[n, c, h, w] = images.shape() else {
            return Err(Error::shape("dataset images", images.shape(), &[0, 0, 0, 0]));
        };
        if labels.len() != n {
            return Err(Error::shape("dataset labels", &[labels.len()], &[n]));
        }
        if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::Index {
                what: "class labels",
                index: labels[i],
                bound: num_classes,
            });
        }
        if images.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::NumericDomain {
                op: "dataset",
                detail: "pixels must lie in [0, 1]".into(),
            });
        }
        Ok(Self {
            pixels: images.into_data(),
            shape: [n, c, h, w],
            labels,
            num_classes,
            split,
            provenance,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    fn image_numel(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn image(&self, i: usize) -> Tensor {
        let k = self.image_numel();
        Tensor::new(&self.image_shape(), self.pixels[i * k..(i + 1) * k].to_vec()).unwrap()
    }

    /// Images `[B, C, H, W]` and labels for the given example indices.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let k = self.image_numel();
        let mut data = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            data.extend_from_slice(&self.pixels[i * k..(i + 1) * k]);
        }
        let [_, c, h, w] = self.shape;
        let images = Tensor::new(&[indices.len(), c, h, w], data).unwrap();
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn channel_means(&self) -> Vec<f64> {
        self.channel_stats().0
    }

    fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let [n, c, h, w] = self.shape;
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for img in self.pixels.chunks_exact(c * hw) {
            for (ch, plane) in img.chunks_exact(hw).enumerate() {
                mean[ch] += plane.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for img in self.pixels.chunks_exact(c * hw) {
            for (ch, plane) in img.chunks_exact(hw).enumerate() {
                var[ch] += plane.iter().map(|p| (p - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = var.into_iter().map(|v| (v / count).sqrt()).collect();
        (mean, std)
    }

    /// Applies `(x − mean) / std` per channel. A dataset is normalized at
    /// most once; later calls leave it unchanged and return `false`.
    pub fn normalize(&mut self, stats: &NormStats) -> Result<bool> {
        if self.normalized {
            return Ok(false);
        }
        let [_, c, h, w] = self.shape;
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(Error::shape("normalize", &[stats.mean.len()], &[c]));
        }
        let hw = h * w;
        for img in self.pixels.chunks_exact_mut(c * hw) {
            for (ch, plane) in img.chunks_exact_mut(hw).enumerate() {
                let (m, s) = (stats.mean[ch], stats.std[ch]);
                plane.iter_mut().for_each(|p| *p = (*p - m) / s);
            }
        }
        self.normalized = true;
        Ok(true)
    }

    /// Nearest-neighbour resize to `size × size`.
    pub fn resize_nearest(&self, size: usize) -> Result<Dataset> {
        if size == 0 {
            return Err(Error::Config("resize target must be positive".into()));
        }
        let [n, c, h, w] = self.shape;
        let mut pixels = Vec::with_capacity(n * c * size * size);
        for img in self.pixels.chunks_exact(c * h * w) {
            for plane in img.chunks_exact(h * w) {
                for y in 0..size {
                    let sy = y * h / size;
                    for x in 0..size {
                        pixels.push(plane[sy * w + x * w / size]);
                    }
                }
            }
        }
        Ok(Dataset {
            pixels,
            shape: [n, c, size, size],
            ..self.clone()
        })
    }
}

impl NormStats {
    /// Per-channel mean and standard deviation over every pixel.
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        if data.normalized {
            return Err(Error::Contract("statistics must come from unnormalized pixels".into()));
        }
        if data.is_empty() {
            return Err(Error::Contract("cannot compute statistics of an empty dataset".into()));
        }
        let (mean, std) = data.channel_stats();
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::NumericDomain {
                op: "normalize",
                detail: "a channel has zero variance".into(),
            });
        }
        Ok(Self { mean, std })
    }
}
