use rand::seq::SliceRandom;

use super::Dataset;
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::seed::stream;

/// One mini-batch: images `[B, C, H, W]` and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Example order for one epoch: identity, or a permutation fixed by `seed`.
pub fn epoch_order(n: usize, seed: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut stream(seed));
    }
    order
}

pub struct BatchIter<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (images, labels) = self.data.gather(&indices);
        Some(Batch { images, labels, indices })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

/// Batches covering every example exactly once; the last one may be short.
pub fn batch_iter(data: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    Ok(BatchIter {
        data,
        order: epoch_order(data.len(), seed, shuffle),
        batch_size,
        pos: 0,
    })
}
