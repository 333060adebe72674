use serde::{Deserialize, Serialize};

use super::ordering::OrderingScheme;
use crate::model::{OperatorBytes, OperatorId};
use crate::{Error, Result};

/// Operators snapshotted in full at one iteration of a window, and the ones
/// whose compute weights ride along because their turn comes later.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub active: Vec<OperatorId>,
    pub compute_only: Vec<OperatorId>,
}

impl Slot {
    pub fn bytes(&self, sizes: &[OperatorBytes]) -> u64 {
        self.active.iter().map(|id| sizes[id.index()].full()).sum::<u64>()
            + self.compute_only.iter().map(|id| sizes[id.index()].compute).sum::<u64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseSchedule {
    pub w: u32,
    pub o_active: u32,
    pub slots: Vec<Slot>,
    pub ordering: OrderingScheme,
    pub created_at: u64,
}

impl SparseSchedule {
    pub fn slot_of(&self, id: OperatorId) -> Option<usize> {
        self.slots.iter().position(|s| s.active.contains(&id))
    }

    pub fn max_slot_bytes(&self, sizes: &[OperatorBytes]) -> u64 {
        self.slots.iter().map(|s| s.bytes(sizes)).max().unwrap_or(0)
    }
}

/// Time available to move one snapshot off the device.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowBudget {
    pub t_iter: f64,
    /// Device-to-host bandwidth for the whole snapshot, bytes/s.
    pub bandwidth: f64,
}

impl WindowBudget {
    pub fn bytes(&self) -> f64 {
        self.t_iter * self.bandwidth
    }

    fn check(&self) -> Result<()> {
        if !(self.t_iter > 0.0 && self.bandwidth > 0.0) {
            return Err(Error::NonPositiveBudget { t_iter: self.t_iter, bandwidth: self.bandwidth });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSize {
    pub w: u32,
    pub o_active: u32,
    /// False when even the smallest permitted slot exceeds the budget.
    pub fits: bool,
}

/// Per-operator full and compute sizes averaged over `sizes`.
pub fn mean_sizes(sizes: &[OperatorBytes]) -> (f64, f64) {
    let n = sizes.len().max(1) as f64;
    let full = sizes.iter().map(|s| s.full() as f64).sum::<f64>() / n;
    let compute = sizes.iter().map(|s| s.compute as f64).sum::<f64>() / n;
    (full, compute)
}

/// Largest per-slot active count whose snapshot fits the budget, shrinking
/// from all operators down to the floor (2, or 1 when `allow_single`).
pub fn find_window_size(
    total: u32,
    full_bytes: f64,
    compute_bytes: f64,
    budget: WindowBudget,
    allow_single: bool,
) -> Result<WindowSize> {
    budget.check()?;
    if total == 0 {
        return Err(Error::EmptyOperators);
    }
    let floor = if allow_single { 1 } else { 2 };
    let fits = |o: u32| (full_bytes * o as f64 + compute_bytes * (total - o) as f64) / budget.bandwidth <= budget.t_iter;
    let mut o = total;
    while o > floor {
        if fits(o) {
            break;
        }
        o -= 1;
    }
    let ok = fits(o);
    if !ok {
        log::warn!(
            "a slot of {o} operators needs {:.3} s per snapshot against a {:.3} s iteration; checkpointing will stall",
            (full_bytes * o as f64 + compute_bytes * (total - o) as f64) / budget.bandwidth,
            budget.t_iter
        );
    }
    Ok(WindowSize { w: total.div_ceil(o), o_active: o, fits: ok })
}

pub fn generate_schedule(ordered: &[OperatorId], o_active: u32, ordering: OrderingScheme, created_at: u64) -> Result<SparseSchedule> {
    if ordered.is_empty() {
        return Err(Error::EmptyOperators);
    }
    let a = o_active.max(1) as usize;
    let n = ordered.len();
    let slots: Vec<Slot> = (0..n.div_ceil(a))
        .map(|i| {
            let end = (i * a + a).min(n);
            Slot { active: ordered[i * a..end].to_vec(), compute_only: ordered[end..].to_vec() }
        })
        .collect();
    Ok(SparseSchedule { w: slots.len() as u32, o_active: a as u32, slots, ordering, created_at })
}

/// Window sizing on mean operator sizes, then a pass over the exact slot
/// sizes that shrinks the active count until every slot fits (or the floor
/// is reached).
pub fn plan_window(
    ordered: &[OperatorId],
    sizes: &[OperatorBytes],
    budget: WindowBudget,
    ordering: OrderingScheme,
    allow_single: bool,
    created_at: u64,
) -> Result<(SparseSchedule, bool)> {
    let subset: Vec<OperatorBytes> = ordered.iter().map(|id| sizes[id.index()]).collect();
    let (full, compute) = mean_sizes(&subset);
    let ws = find_window_size(ordered.len() as u32, full, compute, budget, allow_single)?;
    let floor = if allow_single { 1 } else { 2 };
    let mut o = ws.o_active;
    loop {
        let sched = generate_schedule(ordered, o, ordering, created_at)?;
        let fits = sched.max_slot_bytes(sizes) as f64 <= budget.bytes();
        if fits || o <= floor {
            if !fits {
                log::warn!("slot sizes exceed the snapshot budget at the minimum active count {o}");
            }
            return Ok((sched, fits));
        }
        o -= 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: u32) -> Vec<OperatorId> {
        (0..n).map(OperatorId).collect()
    }

    #[test]
    fn eight_operators_hit_the_floor() {
        let ws = find_window_size(8, 12.0, 2.0, WindowBudget { t_iter: 40.0, bandwidth: 1.0 }, false).unwrap();
        assert_eq!((ws.w, ws.o_active), (4, 2));
        assert!(ws.fits);
    }

    #[test]
    fn dense_fit_gives_single_slot() {
        let ws = find_window_size(8, 12.0, 2.0, WindowBudget { t_iter: 96.0, bandwidth: 1.0 }, false).unwrap();
        assert_eq!((ws.w, ws.o_active), (1, 8));
    }

    #[test]
    fn small_window_of_three() {
        // 2 full (24P) + 4 compute-only (8P) = 32P fits; 3 full + 3 = 42P does not.
        let p = 16.0;
        let ws = find_window_size(6, 12.0 * p, 2.0 * p, WindowBudget { t_iter: 1.0, bandwidth: 32.0 * p }, false).unwrap();
        assert_eq!((ws.w, ws.o_active), (3, 2));
    }

    #[test]
    fn floor_overrun_is_reported() {
        let b = WindowBudget { t_iter: 1.0, bandwidth: 1.0 };
        let ws = find_window_size(8, 12.0, 2.0, b, false).unwrap();
        assert_eq!(ws.o_active, 2);
        assert!(!ws.fits);
        let ws = find_window_size(8, 12.0, 2.0, WindowBudget { t_iter: 26.0, bandwidth: 1.0 }, true).unwrap();
        assert_eq!((ws.o_active, ws.w, ws.fits), (1, 8, true));
    }

    #[test]
    fn non_positive_budget() {
        assert!(matches!(
            find_window_size(4, 1.0, 1.0, WindowBudget { t_iter: 0.0, bandwidth: 1.0 }, false),
            Err(Error::NonPositiveBudget { .. })
        ));
    }

    #[test]
    fn six_ops_three_slots() {
        let s = generate_schedule(&ids(6), 2, OrderingScheme::HardCount, 0).unwrap();
        assert_eq!(s.w, 3);
        assert_eq!(s.slots[0].active, ids(2));
        assert_eq!(s.slots[0].compute_only, ids(6)[2..].to_vec());
        assert_eq!(s.slots[1].compute_only, ids(6)[4..].to_vec());
        assert!(s.slots[2].compute_only.is_empty());
    }

    #[test]
    fn short_last_slot() {
        let s = generate_schedule(&ids(5), 2, OrderingScheme::HardCount, 0).unwrap();
        assert_eq!(s.w, 3);
        assert_eq!(s.slots[2].active, vec![OperatorId(4)]);
    }

    #[test]
    fn single_slot_window() {
        let s = generate_schedule(&ids(5), 5, OrderingScheme::HardCount, 0).unwrap();
        assert_eq!(s.w, 1);
        assert!(s.slots[0].compute_only.is_empty());
        assert!(generate_schedule(&[], 1, OrderingScheme::HardCount, 0).is_err());
    }

    #[test]
    fn heterogeneous_sizes_widen_the_window() {
        // Mean sizes admit 7 per slot, but the first slot then holds both
        // giants in full and overflows by one byte.
        let mut sizes = vec![OperatorBytes { compute: 1, master: 2, optim: 2 }; 8];
        sizes[0] = OperatorBytes { compute: 4, master: 20, optim: 20 };
        sizes[1] = OperatorBytes { compute: 4, master: 20, optim: 20 };
        let budget = WindowBudget { t_iter: 1.0, bandwidth: 100.0 };
        let (s, fits) = plan_window(&ids(8), &sizes, budget, OrderingScheme::HardCount, false, 0).unwrap();
        assert!(fits);
        assert!(s.max_slot_bytes(&sizes) <= 100);
        assert_eq!((s.o_active, s.w), (6, 2));
    }

    proptest! {
        #[test]
        fn window_covers_every_operator(n in 1u32..200, full in 1.0f64..50.0, comp in 0.0f64..5.0, budget in 1.0f64..5000.0) {
            let ws = find_window_size(n, full, comp, WindowBudget { t_iter: budget, bandwidth: 1.0 }, false).unwrap();
            prop_assert!(ws.w >= 1);
            prop_assert!((ws.w - 1) * ws.o_active < n);
            prop_assert!(n <= ws.w * ws.o_active);
            if full * n as f64 <= budget {
                prop_assert_eq!(ws.w, 1);
            }
            let s = generate_schedule(&ids(n), ws.o_active, OrderingScheme::HardCount, 0).unwrap();
            prop_assert_eq!(s.w, ws.w);
            let mut seen: Vec<OperatorId> = s.slots.iter().flat_map(|sl| sl.active.clone()).collect();
            seen.sort();
            prop_assert_eq!(seen, ids(n));
            for (i, sl) in s.slots.iter().enumerate() {
                let later: Vec<OperatorId> = s.slots[i + 1..].iter().flat_map(|x| x.active.clone()).collect();
                prop_assert_eq!(&sl.compute_only, &later);
            }
        }
    }
}
