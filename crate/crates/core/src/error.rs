use thiserror::Error;

use crate::model::{OperatorId, Violation};
use crate::train::log::Direction;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", join(.0))]
    Invalid(Vec<Violation>),

    #[error("config: {0}")]
    Config(String),

    #[error("unsupported compute width: {0} bytes (expected 1, 2 or 4)")]
    UnsupportedWidth(u32),

    #[error("unknown operator {0}")]
    UnknownOperator(OperatorId),

    #[error("mode map has no entry for operator {0}")]
    MissingMode(OperatorId),

    #[error("operator {0} is active but holds no full-precision state")]
    MissingFullState(OperatorId),

    #[error("operator {0} is frozen; dense checkpoints need every operator active")]
    FrozenOperator(OperatorId),

    #[error("batch mismatch: expected {expected}, found {found}")]
    BatchMismatch { expected: String, found: String },

    #[error("checkpoint decode: {0}")]
    Codec(String),

    #[error("checksum mismatch in record for slot {slot}")]
    CorruptRecord { slot: usize },

    #[error("sparse checkpoint is missing the record for slot {slot}")]
    MissingRecord { slot: usize },

    #[error("data source has no micro-batches for iteration {iteration}")]
    DataGap { iteration: u64 },

    #[error(
        "missing log entry: iteration {iteration}, replica {replica}, micro-batch {microbatch}, \
         boundary {boundary}, {direction:?}"
    )]
    MissingLog {
        iteration: u64,
        replica: u32,
        microbatch: u32,
        boundary: u32,
        direction: Direction,
    },

    #[error("unknown worker: stage {stage}, replica {replica}")]
    UnknownWorker { stage: u32, replica: u32 },

    #[error("recovery scope touches the pipeline {0} end but no {1} is available")]
    PipelineEnd(&'static str, &'static str),

    #[error("window budget must be positive (T_iter = {t_iter}, B_PCIe = {bandwidth})")]
    NonPositiveBudget { t_iter: f64, bandwidth: f64 },

    #[error("no checkpoint interval up to {max} meets an overhead cap of {cap}")]
    CapTooSmall { cap: f64, max: u64 },

    #[error("no NCCL coefficients for group size {0}")]
    UnknownGroupSize(u32),

    #[error("operator list is empty")]
    EmptyOperators,

    #[error("top_k = {top_k} exceeds experts per layer = {experts}")]
    TopKExceedsExperts { top_k: u32, experts: u32 },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Other(msg.into())
    }
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
