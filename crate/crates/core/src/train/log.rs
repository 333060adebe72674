//! Sender-side boundary logs.
//!
//! Boundary `b` sits between stage `b` and stage `b + 1`. Stage `b` keeps the
//! activations it sends forward across it; stage `b + 1` keeps the gradients
//! it sends backward across it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TensorBuf;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    Activation,
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LogKey {
    pub iteration: u64,
    pub replica: u32,
    pub microbatch: u32,
    pub boundary: u32,
    pub direction: Direction,
}

impl LogKey {
    /// Stage that sends, and therefore stores, this entry.
    pub fn owner(&self) -> u32 {
        match self.direction {
            Direction::Activation => self.boundary,
            Direction::Gradient => self.boundary + 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpstreamLog {
    pub owner: u32,
    entries: BTreeMap<LogKey, TensorBuf>,
}

impl UpstreamLog {
    pub fn new(owner: u32) -> Self {
        UpstreamLog { owner, entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, key: LogKey, t: TensorBuf) {
        debug_assert_eq!(key.owner(), self.owner);
        self.entries.insert(key, t);
    }

    pub fn get(&self, key: &LogKey) -> Option<&TensorBuf> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &LogKey> {
        self.entries.keys()
    }

    /// Drops every entry older than `iteration`.
    pub fn retain_from(&mut self, iteration: u64) {
        self.entries.retain(|k, _| k.iteration >= iteration);
    }

    pub fn bytes(&self) -> u64 {
        self.entries.values().map(|t| 4 * t.len() as u64).sum()
    }

    pub fn count(&self, iteration: u64, boundary: u32, direction: Direction) -> usize {
        self.entries
            .keys()
            .filter(|k| k.iteration == iteration && k.boundary == boundary && k.direction == direction)
            .count()
    }
}

/// One log per pipeline stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogSet {
    pub stages: Vec<UpstreamLog>,
}

impl LogSet {
    pub fn new(stages: u32) -> Self {
        LogSet { stages: (0..stages).map(UpstreamLog::new).collect() }
    }

    pub fn record(&mut self, key: LogKey, t: TensorBuf) {
        self.stages[key.owner() as usize].insert(key, t);
    }

    pub fn get(&self, key: &LogKey) -> Result<&TensorBuf> {
        self.stages
            .get(key.owner() as usize)
            .and_then(|l| l.get(key))
            .ok_or(Error::MissingLog {
                iteration: key.iteration,
                replica: key.replica,
                microbatch: key.microbatch,
                boundary: key.boundary,
                direction: key.direction,
            })
    }

    /// Moves every entry of `other` into `self`, overwriting duplicates.
    pub fn merge(&mut self, other: LogSet) {
        for log in other.stages {
            for (k, v) in log.entries {
                self.record(k, v);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.stages.iter().map(|l| l.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bytes(&self) -> u64 {
        self.stages.iter().map(|l| l.bytes()).sum()
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for log in &self.stages {
            for (k, v) in &log.entries {
                h.update(k.iteration.to_le_bytes());
                h.update(k.replica.to_le_bytes());
                h.update(k.microbatch.to_le_bytes());
                h.update(k.boundary.to_le_bytes());
                h.update([k.direction as u8]);
                for x in &v.values {
                    h.update(x.to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(iteration: u64, boundary: u32, direction: Direction) -> LogKey {
        LogKey { iteration, replica: 0, microbatch: 0, boundary, direction }
    }

    #[test]
    fn owners_follow_the_sender() {
        assert_eq!(key(1, 0, Direction::Activation).owner(), 0);
        assert_eq!(key(1, 0, Direction::Gradient).owner(), 1);
        let mut set = LogSet::new(3);
        set.record(key(1, 1, Direction::Gradient), TensorBuf::zeros(vec![2]));
        assert_eq!(set.stages[2].len(), 1);
        assert!(set.get(&key(1, 1, Direction::Gradient)).is_ok());
        assert!(matches!(
            set.get(&key(2, 1, Direction::Gradient)),
            Err(Error::MissingLog { iteration: 2, boundary: 1, .. })
        ));
    }
}
