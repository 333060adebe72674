//! Discrete-event cluster simulator.

pub mod engine;
pub mod ettr;
pub mod failures;
pub mod policy;
pub mod sweep;
pub mod timing;

pub use engine::{
    run_simulation, run_with_trace, workers_on_node, GoodputBucket, Metrics, MetricsRow, RecoveryEvent, SimConfig,
};
pub use ettr::analytic_ettr;
pub use failures::{inject_failures, FailureEvent, FailureKind, FailureProcess, FailureTrace};
pub use policy::{build_policy, CostModel, PolicyKind, PolicyParams};
pub use sweep::{interval_sweep, sweep, Scenario, SweepRow};
pub use timing::{iteration_time, localized_iteration_time, nccl_time, pipeline_time};
