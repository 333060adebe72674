//! Deterministic miniature MoE training engine.

pub mod codec;
pub mod data;
pub mod engine;
pub mod log;
pub mod optim;
pub mod quantize;
pub mod snapshot;
mod tensor;

pub use data::{Batch, Bounded, DataSource, FixedData, SeededStream};
pub use engine::{all_active, Activation, Engine, FullState, Metadata, OperatorMode, OperatorState, ToyConfig, TrainState};
pub use log::{Direction, LogKey, LogSet, UpstreamLog};
pub use optim::{adam_step, AdamHyper, Optimizer};
pub use quantize::quantize;
pub use snapshot::{
    snapshot_cost_model, stage_digest, take_dense_checkpoint, take_sparse_snapshot, DenseCheckpoint, Payload,
    SnapshotRecord, SparseCheckpoint,
};
pub use tensor::TensorBuf;
