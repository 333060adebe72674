//! Model, cluster and parallelism descriptors plus checkpoint size arithmetic.

mod operator;
mod precision;
mod sizes;
mod spec;
mod validate;

pub use operator::{OperatorDescriptor, OperatorId, OperatorKind, Popularity};
pub use precision::PrecisionPlan;
pub use sizes::{dense_checkpoint_size, snapshot_payload_size, DenseBreakdown, PayloadMode, METADATA_BYTES};
pub use spec::{ClusterSpec, ModelShape, ModelSpec, NcclCoeff, OperatorBytes, ParallelPlan, ProfiledStats};
pub use validate::{validate, Validated, Violation};
