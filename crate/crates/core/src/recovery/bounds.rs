use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BoundsPolicy {
    /// Sparse window of `w` iterations.
    Sparse { w: u32 },
    /// Dense checkpoint every `interval` iterations.
    Dense { interval: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryBounds {
    pub min: f64,
    pub max: f64,
    pub expected: f64,
}

/// Lost work plus replay per failure, in seconds.
///
/// A sparse window replays `W` iterations to rebuild the dense state and
/// then re-executes up to `W` more, so the loss spans `[0, 2W]` iterations
/// with mean `1.5W`. A dense checkpoint loses on average half an interval.
pub fn recovery_time_bounds(policy: BoundsPolicy, t_iter: f64) -> RecoveryBounds {
    match policy {
        BoundsPolicy::Sparse { w } => {
            let w = w as f64;
            RecoveryBounds { min: 0.0, max: 2.0 * w * t_iter, expected: 1.5 * w * t_iter }
        }
        BoundsPolicy::Dense { interval } => {
            let i = interval as f64;
            RecoveryBounds { min: 0.0, max: i * t_iter, expected: 0.5 * i * t_iter }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let b = recovery_time_bounds(BoundsPolicy::Sparse { w: 6 }, 3.0);
        assert_eq!((b.min, b.max, b.expected), (0.0, 36.0, 27.0));
        let d = recovery_time_bounds(BoundsPolicy::Dense { interval: 31 }, 3.45);
        assert!((d.expected - 53.475).abs() < 1e-9);
        let z = recovery_time_bounds(BoundsPolicy::Sparse { w: 0 }, 3.0);
        assert_eq!((z.min, z.max, z.expected), (0.0, 0.0, 0.0));
    }
}
