//! Checkpoint policies: sparse window scheduling, operator ordering, drift
//! detection and the dense and partial-expert baselines.

mod baselines;
mod drift;
mod moc;
mod ordering;
mod window;

use serde::{Deserialize, Serialize};

pub use baselines::{checkfreq_interval, oracle_interval, MAX_INTERVAL};
pub use drift::{detect_drift, Rescheduler, EXPERT_CHANGE, EXPERT_SHARE};
pub use moc::MocState;
pub use ordering::{observe_batch, order_operators, OrderingScheme};
pub use window::{
    find_window_size, generate_schedule, mean_sizes, plan_window, Slot, SparseSchedule, WindowBudget, WindowSize,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PolicyState {
    Sparse(SparseSchedule),
    CheckFreq { interval: u64, overhead_cap: f64 },
    GeminiOracle { interval: u64 },
    Moc(MocState),
}

impl PolicyState {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyState::Sparse(_) => "sparse",
            PolicyState::CheckFreq { .. } => "checkfreq",
            PolicyState::GeminiOracle { .. } => "gemini",
            PolicyState::Moc(_) => "moc",
        }
    }
}
