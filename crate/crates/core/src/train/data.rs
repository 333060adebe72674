use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// One micro-batch of tokens; both buffers are `tokens x dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: usize,
    pub inputs: Vec<f32>,
    pub targets: Vec<f32>,
}

/// Supplies micro-batch `microbatch` of data-parallel replica `replica` for
/// iteration `iteration` (1-based). Implementations must be pure functions of
/// their arguments so replay sees the same data.
pub trait DataSource: Sync {
    fn microbatch(&self, iteration: u64, replica: u32, microbatch: u32) -> Result<Batch>;
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent generator for a tuple of counters.
pub(crate) fn stream(seed: u64, words: &[u64]) -> ChaCha8Rng {
    let key = words.iter().fold(splitmix(seed), |acc, w| splitmix(acc ^ splitmix(*w)));
    ChaCha8Rng::seed_from_u64(key)
}

/// Counter-based synthetic data: uniform inputs and targets in [-1, 1].
#[derive(Clone, Debug)]
pub struct SeededStream {
    pub seed: u64,
    pub tokens: usize,
    pub dim: usize,
}

impl DataSource for SeededStream {
    fn microbatch(&self, iteration: u64, replica: u32, microbatch: u32) -> Result<Batch> {
        let mut rng = stream(self.seed, &[0xda7a, iteration, replica as u64, microbatch as u64]);
        let n = self.tokens * self.dim;
        let inputs = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let targets = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Ok(Batch { tokens: self.tokens, inputs, targets })
    }
}

/// The same batch for every request.
#[derive(Clone, Debug)]
pub struct FixedData(pub Batch);

impl DataSource for FixedData {
    fn microbatch(&self, _: u64, _: u32, _: u32) -> Result<Batch> {
        Ok(self.0.clone())
    }
}

/// Wraps a source and refuses iterations past `last`.
#[derive(Clone, Debug)]
pub struct Bounded<D> {
    pub inner: D,
    pub last: u64,
}

impl<D: DataSource> DataSource for Bounded<D> {
    fn microbatch(&self, iteration: u64, replica: u32, microbatch: u32) -> Result<Batch> {
        if iteration > self.last {
            return Err(Error::DataGap { iteration });
        }
        self.inner.microbatch(iteration, replica, microbatch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_is_pure() {
        let s = SeededStream { seed: 7, tokens: 3, dim: 4 };
        assert_eq!(s.microbatch(5, 1, 2).unwrap(), s.microbatch(5, 1, 2).unwrap());
        assert_ne!(s.microbatch(5, 1, 2).unwrap(), s.microbatch(5, 1, 3).unwrap());
        assert_ne!(s.microbatch(5, 0, 2).unwrap(), s.microbatch(6, 0, 2).unwrap());
    }

    #[test]
    fn bounded_reports_gap() {
        let s = Bounded { inner: SeededStream { seed: 1, tokens: 1, dim: 1 }, last: 3 };
        assert!(s.microbatch(3, 0, 0).is_ok());
        assert!(matches!(s.microbatch(4, 0, 0), Err(Error::DataGap { iteration: 4 })));
    }
}
