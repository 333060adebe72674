use crate::train::LogSet;

/// Drops log entries older than the persisted window's start; returns how
/// many were removed.
pub fn gc_logs(logs: &mut LogSet, persisted_window_start: u64) -> usize {
    let before = logs.len();
    for l in &mut logs.stages {
        l.retain_from(persisted_window_start);
    }
    before - logs.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{Direction, LogKey, TensorBuf};

    fn filled() -> LogSet {
        let mut set = LogSet::new(2);
        for it in 1..=6 {
            for mb in 0..2 {
                for direction in [Direction::Activation, Direction::Gradient] {
                    set.record(
                        LogKey { iteration: it, replica: 0, microbatch: mb, boundary: 0, direction },
                        TensorBuf::zeros(vec![1]),
                    );
                }
            }
        }
        set
    }

    #[test]
    fn everything_older_goes() {
        let mut s = filled();
        assert_eq!(gc_logs(&mut s, 100), 24);
        assert!(s.is_empty());
    }

    #[test]
    fn newer_entries_survive() {
        let mut s = filled();
        assert_eq!(gc_logs(&mut s, 4), 12);
        assert_eq!(s.len(), 12);
        assert!(s.stages.iter().flat_map(|l| l.keys()).all(|k| k.iteration >= 4));
    }
}
