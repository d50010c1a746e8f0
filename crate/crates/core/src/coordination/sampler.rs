use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slicing::{RatioGrid, WidthRatio};

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal (it is a u128).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::validation("rng_state", what.to_string());
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word_pos is not an integer"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Sorted activated ratios `[s, m1, m2, l]` of one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RatioList(pub [WidthRatio; 4]);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherRef {
    Subnet(WidthRatio),
    /// The frozen pretrained network.
    External,
}

impl RatioList {
    pub fn ratios(&self) -> &[WidthRatio; 4] {
        &self.0
    }

    pub fn index_of(&self, r: WidthRatio) -> Result<usize> {
        self.0
            .iter()
            .position(|x| *x == r)
            .ok_or_else(|| Error::validation("ratio", format!("{r} is not among the activated ratios")))
    }

    /// The smallest activated ratio strictly above `r`, or the external
    /// teacher for the largest. A ratio drawn twice shares one teacher.
    pub fn teacher_of(&self, r: WidthRatio) -> Result<TeacherRef> {
        self.index_of(r)?;
        Ok(match self.0.iter().find(|x| **x > r) {
            Some(next) => TeacherRef::Subnet(*next),
            None => TeacherRef::External,
        })
    }
}

/// Draws the activated ratios of each iteration.
///
/// The open range `(s, l)` of grid points is split at `m = (s + l) / 2` into
/// a lower band `(s, m]` and an upper band `(m, l)`; `m1` and `m2` are drawn
/// uniformly and independently from the two bands.
#[derive(Clone, Debug)]
pub struct StableSampler {
    grid: RatioGrid,
    lower: Vec<WidthRatio>,
    upper: Vec<WidthRatio>,
    rng: ChaCha8Rng,
}

impl StableSampler {
    pub fn new(grid: RatioGrid, seed: u64) -> Result<Self> {
        Self::with_rng(grid, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(grid: RatioGrid, rng: ChaCha8Rng) -> Result<Self> {
        let mid = grid.midpoint();
        let (s, l) = (grid.smallest(), grid.largest());
        let lower: Vec<_> = grid
            .points()
            .into_iter()
            .filter(|r| *r > s && r.value() <= mid)
            .collect();
        let upper: Vec<_> = grid
            .points()
            .into_iter()
            .filter(|r| r.value() > mid && *r < l)
            .collect();
        if lower.is_empty() || upper.is_empty() {
            return Err(Error::validation(
                "grid",
                format!(
                    "sampling bands around {:.4} need a grid point on each side (X = {}, need at least 4)",
                    mid.to_f64().unwrap_or(f64::NAN),
                    grid.num_networks()
                ),
            ));
        }
        Ok(StableSampler { grid, lower, upper, rng })
    }

    pub fn grid(&self) -> &RatioGrid {
        &self.grid
    }

    pub fn lower_band(&self) -> &[WidthRatio] {
        &self.lower
    }

    pub fn upper_band(&self) -> &[WidthRatio] {
        &self.upper
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// `(m1, m2)` with `m1` uniform over the lower band, `m2` over the upper.
    pub fn stable_sample(&mut self) -> (WidthRatio, WidthRatio) {
        let m1 = self.lower[self.rng.random_range(0..self.lower.len())];
        let m2 = self.upper[self.rng.random_range(0..self.upper.len())];
        (m1, m2)
    }

    /// Two independent uniform draws from the grid points in the open range
    /// `(s, l)`, sorted. They may coincide.
    pub fn uniform_sample(&mut self) -> (WidthRatio, WidthRatio) {
        let inner: Vec<WidthRatio> = self.lower.iter().chain(&self.upper).copied().collect();
        let a = inner[self.rng.random_range(0..inner.len())];
        let b = inner[self.rng.random_range(0..inner.len())];
        (a.min(b), a.max(b))
    }

    /// Ratios to activate in one iteration.
    ///
    /// With `constant_smallest` off the lowest slot is drawn uniformly from
    /// the grid points in `[s, m]` strictly below `m1`.
    pub fn sample(&mut self, stable: bool, constant_smallest: bool) -> RatioList {
        let (m1, m2) = if stable { self.stable_sample() } else { self.uniform_sample() };
        let s = if constant_smallest {
            self.grid.smallest()
        } else {
            let mid = self.grid.midpoint();
            let pool: Vec<WidthRatio> = self
                .grid
                .points()
                .into_iter()
                .filter(|r| r.value() <= mid && *r < m1)
                .collect();
            pool[self.rng.random_range(0..pool.len())]
        };
        RatioList([s, m1, m2, self.grid.largest()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(s: &str) -> WidthRatio {
        s.parse().unwrap()
    }

    #[test]
    fn bands_on_the_default_grid() {
        let g = RatioGrid::parse("1/4", "1", "1/16").unwrap();
        let sm = StableSampler::new(g, 0).unwrap();
        let b1: Vec<String> = sm.lower_band().iter().map(|x| x.to_string()).collect();
        let b2: Vec<String> = sm.upper_band().iter().map(|x| x.to_string()).collect();
        assert_eq!(b1, ["5/16", "3/8", "7/16", "1/2", "9/16", "5/8"]);
        assert_eq!(b2, ["11/16", "3/4", "13/16", "7/8", "15/16"]);
    }

    #[test]
    fn four_point_grid_is_constant() {
        let g = RatioGrid::parse("1/4", "1", "1/4").unwrap();
        let mut sm = StableSampler::new(g, 9).unwrap();
        for _ in 0..100 {
            assert_eq!(sm.stable_sample(), (r("1/2"), r("3/4")));
        }
    }

    #[test]
    fn rejects_grids_with_an_empty_band() {
        assert!(StableSampler::new(RatioGrid::parse("1/2", "1", "1/4").unwrap(), 0).is_err());
        assert!(StableSampler::new(RatioGrid::parse("1/4", "1", "3/4").unwrap(), 0).is_err());
    }

    #[test]
    fn teacher_chain() {
        let list = RatioList([r("1/4"), r("7/16"), r("3/4"), r("1")]);
        assert_eq!(list.teacher_of(r("1/4")).unwrap(), TeacherRef::Subnet(r("7/16")));
        assert_eq!(list.teacher_of(r("3/4")).unwrap(), TeacherRef::Subnet(r("1")));
        assert_eq!(list.teacher_of(r("1")).unwrap(), TeacherRef::External);
        assert!(list.teacher_of(r("1/2")).is_err());

        let twice = RatioList([r("1/4"), r("1/2"), r("1/2"), r("1")]);
        assert_eq!(twice.teacher_of(r("1/2")).unwrap(), TeacherRef::Subnet(r("1")));
        assert_eq!(twice.teacher_of(r("1/4")).unwrap(), TeacherRef::Subnet(r("1/2")));
    }

    #[test]
    fn sampled_lists_are_sorted() {
        let g = RatioGrid::parse("1/4", "1", "1/16").unwrap();
        let mut sm = StableSampler::new(g, 3).unwrap();
        for (stable, constant) in [(true, true), (false, true), (true, false), (false, false)] {
            for _ in 0..500 {
                let list = sm.sample(stable, constant);
                let [s, m1, m2, l] = list.0;
                assert!(s < m1 && m1 <= m2 && m2 < l, "{list:?}");
                if stable {
                    assert!(m1 < m2);
                }
                assert!(g.contains(list.0[0]) && list.0[0].value() <= g.midpoint());
                if constant {
                    assert_eq!(list.0[0], r("1/4"));
                }
            }
        }
    }

    #[test]
    fn uniform_draws_on_four_points_can_coincide() {
        let g = RatioGrid::parse("1/4", "1", "1/4").unwrap();
        let mut sm = StableSampler::new(g, 5).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            seen.insert(sm.uniform_sample());
        }
        let all: std::collections::BTreeSet<_> =
            [(r("1/2"), r("1/2")), (r("1/2"), r("3/4")), (r("3/4"), r("3/4"))].into();
        assert_eq!(seen, all);
    }

    #[test]
    fn rng_state_round_trips() {
        let g = RatioGrid::parse("1/4", "1", "1/16").unwrap();
        let mut a = StableSampler::new(g, 11).unwrap();
        a.stable_sample();
        let state = a.rng_state();
        let mut b = StableSampler::with_rng(g, state.restore().unwrap()).unwrap();
        for _ in 0..50 {
            assert_eq!(a.stable_sample(), b.stable_sample());
        }
    }
}
