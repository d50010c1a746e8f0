//! In-memory labelled image sets.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Images stored as `[N, C, S, S]` f32 values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
}

/// Images `[B, C, S, S]` and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, channels: usize, size: usize, num_classes: usize) -> Result<Self> {
        let per = channels * size * size;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::shape(
                "dataset",
                format!("{} pixels for {} images of {channels}x{size}x{size}", images.len(), labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::validation("labels", format!("{bad} not in [0, {num_classes})")));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("images", "non-finite pixel"));
        }
        Ok(Dataset {
            images,
            labels,
            channels,
            size,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn batch<T: Real>(&self, indices: &[usize]) -> Batch<T> {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.images[i * per..(i + 1) * per].iter().map(|v| T::lit(*v as f64)));
        }
        Batch {
            images: Tensor::new(vec![indices.len(), self.channels, self.size, self.size], data)
                .expect("batch shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive batches in storage order.
    pub fn batches<T: Real>(&self, batch_size: usize) -> impl Iterator<Item = Batch<T>> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let bs = batch_size.max(1);
        (0..self.len().div_ceil(bs)).map(move |k| self.batch(&idx[k * bs..((k + 1) * bs).min(idx.len())]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_sizes_and_labels() {
        assert!(Dataset::new(vec![0.0; 10], vec![0, 1], 1, 2, 2).is_err());
        assert!(Dataset::new(vec![0.0; 8], vec![0, 2], 1, 2, 2).is_err());
        assert!(Dataset::new(vec![0.0; 8], vec![0, 1], 1, 2, 2).is_ok());
    }

    #[test]
    fn batching_keeps_order() {
        let ds = Dataset::new((0..12).map(|v| v as f32).collect(), vec![0, 1, 0], 1, 2, 2).unwrap();
        let b: Vec<Batch<f64>> = ds.batches(2).collect();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].images.shape(), &[2, 1, 2, 2]);
        assert_eq!(b[1].labels, vec![0]);
        assert_eq!(b[1].images.data(), &[8.0, 9.0, 10.0, 11.0]);
    }
}
