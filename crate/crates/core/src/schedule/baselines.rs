use crate::sim::ettr::analytic_ettr;
use crate::{Error, Result};

/// Largest interval any search will consider.
pub const MAX_INTERVAL: u64 = 1_000_000;

/// Smallest interval whose amortized persist time stays within
/// `cap * t_iter` per iteration.
pub fn checkfreq_interval(persist_seconds: f64, t_iter: f64, cap: f64) -> Result<u64> {
    if !(cap > 0.0 && cap <= 1.0) {
        return Err(Error::Config(format!("overhead cap {cap} must lie in (0, 1]")));
    }
    if persist_seconds <= 0.0 {
        return Ok(1);
    }
    let allowed = cap * t_iter;
    let mut i = (persist_seconds / allowed).ceil().max(1.0) as u64;
    while i > 1 && persist_seconds / (i - 1) as f64 <= allowed {
        i -= 1;
    }
    while persist_seconds / i as f64 > allowed {
        i += 1;
    }
    if i > MAX_INTERVAL {
        return Err(Error::CapTooSmall { cap, max: MAX_INTERVAL });
    }
    Ok(i)
}

/// Interval in `1..=i_max` maximizing the closed-form ETTR with an expected
/// loss of half an interval per failure; ties go to the smaller interval.
pub fn oracle_interval(t_ckpt: f64, t_iter: f64, mtbf: f64, i_max: u64) -> u64 {
    let mut best = (1u64, f64::NEG_INFINITY);
    for i in 1..=i_max.max(1) {
        let e = analytic_ettr(t_ckpt, i, t_iter, 0.5 * i as f64 * t_iter, mtbf);
        if e > best.1 {
            best = (i, e);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkfreq_examples() {
        assert_eq!(checkfreq_interval(12.4, 3.45, 0.03).unwrap(), 120);
        assert_eq!(checkfreq_interval(0.0, 3.45, 0.03).unwrap(), 1);
        assert_eq!(checkfreq_interval(3.0, 3.45, 1.0).unwrap(), 1);
        assert!(matches!(checkfreq_interval(1e9, 1.0, 1e-6), Err(Error::CapTooSmall { .. })));
        assert!(checkfreq_interval(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(oracle_interval(6.0, 3.0, 600.0, 10_000), 28);
        assert_eq!(oracle_interval(6.0, 3.0, f64::INFINITY, 500), 500);
        assert_eq!(oracle_interval(0.0, 3.0, 600.0, 10_000), 1);
    }

    #[test]
    fn oracle_matches_exhaustive_sweep() {
        for (ck, t, mtbf) in [(2.0, 1.0, 300.0), (12.0, 3.45, 3600.0), (40.0, 2.0, 7200.0), (0.5, 0.3, 60.0)] {
            let best = (1..=5000u64)
                .map(|i| (i, analytic_ettr(ck, i, t, 0.5 * i as f64 * t, mtbf)))
                .fold((0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
            assert_eq!(oracle_interval(ck, t, mtbf, 5000), best.0);
        }
    }
}
