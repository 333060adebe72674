//! Sparse-to-dense conversion, localized replay from boundary logs,
//! recovery scoping and log garbage collection.

mod bounds;
mod convert;
mod gc;
mod localized;
mod scope;

pub use bounds::{recovery_time_bounds, BoundsPolicy, RecoveryBounds};
pub use convert::{conversion_plan, sparse_to_dense_convert, ConversionPlan, ConversionStep};
pub use gc::gc_logs;
pub use localized::{localized_recover, RecoveredStages};
pub use scope::{recovery_scope, RecoveryScope, Segment, Worker};
