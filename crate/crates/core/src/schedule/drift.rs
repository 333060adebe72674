/// Relative change above which one expert counts as having drifted.
pub const EXPERT_CHANGE: f64 = 0.10;
/// Share of drifted experts that triggers a reschedule.
pub const EXPERT_SHARE: f64 = 0.25;

/// True when at least a quarter of the experts changed activation frequency
/// by more than 10%.
pub fn detect_drift(old: &[f64], new: &[f64]) -> bool {
    assert_eq!(old.len(), new.len(), "popularity vectors must cover the same experts");
    if old.is_empty() {
        return false;
    }
    let changed = old
        .iter()
        .zip(new)
        .filter(|(o, n)| {
            let diff = (*n - *o).abs();
            if **o == 0.0 {
                diff > 0.0
            } else {
                diff / o.abs() > EXPERT_CHANGE
            }
        })
        .count();
    changed as f64 >= EXPERT_SHARE * old.len() as f64
}

/// Holds a replacement schedule until the current window closes.
#[derive(Clone, Debug)]
pub struct Rescheduler<S> {
    pub current: S,
    pending: Option<S>,
}

impl<S> Rescheduler<S> {
    pub fn new(current: S) -> Self {
        Rescheduler { current, pending: None }
    }

    pub fn propose(&mut self, next: S) {
        self.pending = Some(next);
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    /// Call at a window boundary; returns true when a new schedule took over.
    pub fn at_window_boundary(&mut self) -> bool {
        match self.pending.take() {
            Some(s) => {
                self.current = s;
                true
            }
            None => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Vec<f64> {
        vec![100.0; 64]
    }

    #[test]
    fn quarter_at_twelve_percent_fires() {
        let mut new = base();
        for x in &mut new[..16] {
            *x = 112.0;
        }
        assert!(detect_drift(&base(), &new));
    }

    #[test]
    fn fifteen_experts_is_not_enough() {
        let mut new = base();
        for x in &mut new[..15] {
            *x = 150.0;
        }
        assert!(!detect_drift(&base(), &new));
    }

    #[test]
    fn no_change() {
        assert!(!detect_drift(&base(), &base()));
    }

    #[test]
    fn swap_waits_for_boundary() {
        let mut r = Rescheduler::new(1);
        r.propose(2);
        assert_eq!(r.current, 1);
        assert!(r.at_window_boundary());
        assert_eq!(r.current, 2);
        assert!(!r.at_window_boundary());
    }
}
