use serde::{Deserialize, Serialize};

use super::{ModelSpec, OperatorDescriptor, PrecisionPlan};

/// Iteration counter, RNG seed and data cursor, accounted as a fixed block.
pub const METADATA_BYTES: u64 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PayloadMode {
    /// Master weights and optimizer state.
    Full,
    /// Reduced-precision compute weights only.
    ComputeOnly,
}

pub fn snapshot_payload_size(op: &OperatorDescriptor, mode: PayloadMode, plan: &PrecisionPlan) -> u64 {
    let per_param = match mode {
        PayloadMode::Full => plan.full_bytes(),
        PayloadMode::ComputeOnly => plan.compute_bytes,
    };
    op.param_count * per_param as u64
}

/// Dense checkpoint size split by what the bytes hold.
///
/// "params" buckets hold master weights and "optimizer" buckets hold the
/// optimizer tensors; gates count as non-expert state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBreakdown {
    pub expert_optimizer: u64,
    pub expert_params: u64,
    pub non_expert_optimizer: u64,
    pub non_expert_params: u64,
    pub metadata: u64,
}

impl DenseBreakdown {
    /// Sum of the operator payloads, excluding metadata.
    pub fn state_bytes(&self) -> u64 {
        self.expert_optimizer + self.expert_params + self.non_expert_optimizer + self.non_expert_params
    }

    pub fn total(&self) -> u64 {
        self.state_bytes() + self.metadata
    }

    pub fn shares(&self) -> [f64; 5] {
        let t = self.total() as f64;
        [
            self.expert_optimizer as f64 / t,
            self.expert_params as f64 / t,
            self.non_expert_optimizer as f64 / t,
            self.non_expert_params as f64 / t,
            self.metadata as f64 / t,
        ]
    }
}

pub fn dense_checkpoint_size(model: &ModelSpec, plan: &PrecisionPlan) -> DenseBreakdown {
    let mut b = DenseBreakdown { metadata: METADATA_BYTES, ..Default::default() };
    for op in &model.operators {
        let optim = op.param_count * plan.optimizer_bytes as u64;
        let master = op.param_count * plan.master_bytes as u64;
        if op.kind.is_expert() {
            b.expert_optimizer += optim;
            b.expert_params += master;
        } else {
            b.non_expert_optimizer += optim;
            b.non_expert_params += master;
        }
    }
    b
}
