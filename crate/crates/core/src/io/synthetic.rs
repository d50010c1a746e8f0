//! Deterministic synthetic image classification data.
//!
//! Every class has a base pattern of uniform pixels; a sample is its class
//! pattern plus Gaussian noise, clamped to `[0, 1]`. Each image is a pure
//! function of `(spec, split, index)`, so datasets can be regenerated anywhere
//! without storing them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub image_size: usize,
    #[serde(default = "three")]
    pub channels: usize,
    pub seed: u64,
    pub noise: f64,
    pub train: usize,
    pub test: usize,
}

fn three() -> usize {
    3
}

const PATTERN_STREAM: u64 = 1 << 63;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation("data.num_classes", "need at least 2 classes"));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(Error::validation("data.image_size", "image must be non-empty"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::validation("data.noise", "must be finite and >= 0"));
        }
        if self.train == 0 || self.test == 0 {
            return Err(Error::validation("data.train", "both splits need at least one sample"));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Test => self.test,
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    pub fn base_pattern(&self, class: usize) -> Vec<f32> {
        let mut rng = self.rng(PATTERN_STREAM | class as u64);
        (0..self.image_len()).map(|_| rng.random::<f32>()).collect()
    }

    /// Sample `index` of `split`: its pixels and label `index mod K`.
    pub fn sample(&self, split: Split, index: usize) -> Result<(Vec<f32>, usize)> {
        if index >= self.count(split) {
            return Err(Error::OutOfRange(format!(
                "sample {index} of {split:?} split with {} samples",
                self.count(split)
            )));
        }
        let label = index % self.num_classes;
        let mut img = self.base_pattern(label);
        if self.noise > 0.0 {
            let split_bit = match split {
                Split::Train => 0,
                Split::Test => 1u64 << 62,
            };
            let mut rng = self.rng(split_bit | index as u64);
            let normal = Normal::new(0.0f64, self.noise).expect("noise validated");
            for px in &mut img {
                *px = (*px as f64 + normal.sample(&mut rng)) as f32;
            }
        }
        for px in &mut img {
            *px = px.clamp(0.0, 1.0);
        }
        Ok((img, label))
    }

    pub fn generate(&self, split: Split) -> Result<Dataset> {
        self.validate()?;
        let n = self.count(split);
        let mut images = Vec::with_capacity(n * self.image_len());
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let (img, y) = self.sample(split, i)?;
            images.extend_from_slice(&img);
            labels.push(y);
        }
        Dataset::new(images, labels, self.channels, self.image_size, self.num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 10,
            image_size: 4,
            channels: 3,
            seed: 9,
            noise,
            train: 30,
            test: 20,
        }
    }

    #[test]
    fn noiseless_samples_equal_base_pattern() {
        let s = spec(0.0);
        for i in [3, 13, 23] {
            let (img, y) = s.sample(Split::Train, i).unwrap();
            assert_eq!(y, 3);
            assert_eq!(img, s.base_pattern(3));
        }
    }

    #[test]
    fn generation_is_pure_and_bounded() {
        let s = spec(0.3);
        let a = s.generate(Split::Train).unwrap();
        let b = s.generate(Split::Train).unwrap();
        assert_eq!(a, b);
        assert!(a.images.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(a.labels[17], 7);
        let t = s.generate(Split::Test).unwrap();
        assert_ne!(a.images[..48], t.images[..48]);
        assert!(s.sample(Split::Test, 20).is_err());
    }
}
