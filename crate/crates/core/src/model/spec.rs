use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{OperatorDescriptor, OperatorId, OperatorKind, Popularity, PrecisionPlan};
use crate::{Error, Result};

/// Architecture of an MoE model plus its flattened operator list.
///
/// Operators are laid out layer-major: the layer's experts in index order,
/// then its non-expert block, then its gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub layers: u32,
    pub experts_per_layer: u32,
    pub top_k: u32,
    pub shared_experts: u32,
    pub hidden: u64,
    pub expert_ffn: u64,
    pub operators: Vec<OperatorDescriptor>,
}

/// Hidden sizes from which per-operator parameter counts are derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub name: String,
    pub layers: u32,
    pub experts_per_layer: u32,
    pub top_k: u32,
    #[serde(default)]
    pub shared_experts: u32,
    pub hidden: u64,
    pub expert_ffn: u64,
    /// Weight matrices per expert MLP (3 for gated MLPs).
    #[serde(default = "default_mlp_matrices")]
    pub mlp_matrices: u64,
    /// Attention and norm parameters per layer; defaults to `4 * hidden^2`.
    #[serde(default)]
    pub attention_params: Option<u64>,
    /// Tokens per batch each expert may process.
    #[serde(default)]
    pub expert_capacity: Option<u64>,
}

fn default_mlp_matrices() -> u64 {
    3
}

impl ModelShape {
    pub fn expert_params(&self) -> u64 {
        self.mlp_matrices * self.hidden * self.expert_ffn
    }

    pub fn non_expert_params(&self) -> u64 {
        let attn = self.attention_params.unwrap_or(4 * self.hidden * self.hidden);
        attn + self.shared_experts as u64 * self.expert_params()
    }

    pub fn gate_params(&self) -> u64 {
        self.experts_per_layer as u64 * self.hidden
    }
}

impl ModelSpec {
    pub fn from_shape(shape: &ModelShape) -> Result<Self> {
        let mut m = Self::with_sizes(
            &shape.name,
            shape.layers,
            shape.experts_per_layer,
            shape.top_k,
            shape.expert_params(),
            shape.non_expert_params(),
            shape.gate_params(),
        )?;
        m.shared_experts = shape.shared_experts;
        m.hidden = shape.hidden;
        m.expert_ffn = shape.expert_ffn;
        if let Some(c) = shape.expert_capacity {
            for op in &mut m.operators {
                if let OperatorKind::Expert { capacity, .. } = &mut op.kind {
                    *capacity = c;
                }
            }
        }
        m.check()?;
        Ok(m)
    }

    pub fn with_sizes(
        name: &str,
        layers: u32,
        experts_per_layer: u32,
        top_k: u32,
        expert_params: u64,
        non_expert_params: u64,
        gate_params: u64,
    ) -> Result<Self> {
        let mut operators = Vec::with_capacity((layers * (experts_per_layer + 2)) as usize);
        for layer in 0..layers {
            for expert in 0..experts_per_layer {
                operators.push((OperatorKind::Expert { layer, expert, capacity: 1 }, expert_params));
            }
            operators.push((OperatorKind::NonExpert { layer }, non_expert_params));
            operators.push((OperatorKind::Gate { layer }, gate_params));
        }
        let operators = operators
            .into_iter()
            .enumerate()
            .map(|(i, (kind, param_count))| OperatorDescriptor {
                id: OperatorId(i as u32),
                kind,
                param_count,
                popularity: Popularity::default(),
            })
            .collect();
        let m = ModelSpec {
            name: name.to_string(),
            layers,
            experts_per_layer,
            top_k,
            shared_experts: 0,
            hidden: 0,
            expert_ffn: 0,
            operators,
        };
        m.check()?;
        Ok(m)
    }

    /// Every operator gets `params` parameters.
    pub fn uniform(layers: u32, experts_per_layer: u32, top_k: u32, params: u64) -> Result<Self> {
        Self::with_sizes("uniform", layers, experts_per_layer, top_k, params, params, params)
    }

    pub fn check(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.experts_per_layer {
            return Err(Error::TopKExceedsExperts { top_k: self.top_k, experts: self.experts_per_layer });
        }
        let expected = (self.layers * (self.experts_per_layer + 2)) as usize;
        if self.operators.len() != expected {
            return Err(Error::invalid(format!(
                "model has {} operators, expected {expected}",
                self.operators.len()
            )));
        }
        for (i, op) in self.operators.iter().enumerate() {
            if op.id.index() != i {
                return Err(Error::invalid(format!("operator at position {i} has id {}", op.id)));
            }
            if op.param_count == 0 {
                return Err(Error::invalid(format!("operator {} has no parameters", op.id)));
            }
            if let OperatorKind::Expert { capacity: 0, .. } = op.kind {
                return Err(Error::invalid(format!("expert {} has zero capacity", op.id)));
            }
        }
        Ok(())
    }

    fn stride(&self) -> u32 {
        self.experts_per_layer + 2
    }

    pub fn expert_op(&self, layer: u32, expert: u32) -> OperatorId {
        OperatorId(layer * self.stride() + expert)
    }

    pub fn non_expert_op(&self, layer: u32) -> OperatorId {
        OperatorId(layer * self.stride() + self.experts_per_layer)
    }

    pub fn gate_op(&self, layer: u32) -> OperatorId {
        OperatorId(layer * self.stride() + self.experts_per_layer + 1)
    }

    pub fn op(&self, id: OperatorId) -> Result<&OperatorDescriptor> {
        self.operators.get(id.index()).ok_or(Error::UnknownOperator(id))
    }

    pub fn total_params(&self) -> u64 {
        self.operators.iter().map(|o| o.param_count).sum()
    }

    pub fn expert_params(&self) -> u64 {
        self.operators.iter().filter(|o| o.kind.is_expert()).map(|o| o.param_count).sum()
    }
}

/// Affine collective-cost coefficients for one group size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NcclCoeff {
    /// Fixed latency, seconds.
    pub alpha: f64,
    /// Seconds per byte.
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub nodes: u32,
    pub gpus_per_node: u32,
    /// Effective GPU-to-host bandwidth per GPU, bytes/s.
    pub pcie_bandwidth: f64,
    /// Host-to-peer replication bandwidth per node, bytes/s.
    pub replication_bandwidth: f64,
    /// Aggregate bandwidth to durable storage, bytes/s (disk-based baseline).
    #[serde(default = "default_persist_bandwidth")]
    pub persist_bandwidth: f64,
    /// Keyed by group size.
    #[serde(default)]
    pub nccl: BTreeMap<u32, NcclCoeff>,
    pub cpu_mem_per_node: u64,
}

fn default_persist_bandwidth() -> f64 {
    5e9
}

impl ClusterSpec {
    pub fn gpus(&self) -> u32 {
        self.nodes * self.gpus_per_node
    }

    /// Snapshot bandwidth with the state sharded evenly over every GPU.
    pub fn aggregate_pcie(&self) -> f64 {
        self.pcie_bandwidth * self.gpus() as f64
    }

    pub fn aggregate_replication(&self) -> f64 {
        self.replication_bandwidth * self.nodes as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelPlan {
    pub pp_stages: u32,
    pub dp_degree: u32,
    pub ep_degree: u32,
    /// Stage of each operator, indexed by operator id.
    pub stage_map: Vec<u32>,
    pub microbatches: u32,
    pub global_batch: u32,
    pub microbatch_size: u32,
}

impl ParallelPlan {
    /// Splits layers into `pp` contiguous, balanced stages.
    pub fn layer_contiguous(
        model: &ModelSpec,
        pp: u32,
        dp: u32,
        ep: u32,
        global_batch: u32,
        microbatch_size: u32,
    ) -> Self {
        let pp = pp.max(1);
        let stage_map = model
            .operators
            .iter()
            .map(|op| (op.kind.layer() as u64 * pp as u64 / model.layers.max(1) as u64) as u32)
            .collect();
        let per_replica = global_batch / dp.max(1);
        ParallelPlan {
            pp_stages: pp,
            dp_degree: dp,
            ep_degree: ep,
            stage_map,
            microbatches: per_replica / microbatch_size.max(1),
            global_batch,
            microbatch_size,
        }
    }

    pub fn stage_of(&self, op: OperatorId) -> Option<u32> {
        self.stage_map.get(op.index()).copied()
    }

    pub fn operators_in_stage(&self, stage: u32) -> impl Iterator<Item = OperatorId> + '_ {
        self.stage_map
            .iter()
            .enumerate()
            .filter(move |(_, s)| **s == stage)
            .map(|(i, _)| OperatorId(i as u32))
    }
}

/// Per-operator checkpoint sizes in bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorBytes {
    pub compute: u64,
    pub master: u64,
    pub optim: u64,
}

impl OperatorBytes {
    pub fn full(&self) -> u64 {
        self.master + self.optim
    }
}

/// Measured or calibrated timings that drive scheduling and simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfiledStats {
    /// Per-micro-batch time of each stage, one row per data-parallel pipeline.
    pub stage_times: Vec<Vec<f64>>,
    pub t_sync: f64,
    pub t_update: f64,
    /// Measured iteration time; derived from the pipeline model when absent.
    pub t_iter_measured: Option<f64>,
    pub operator_bytes: Vec<OperatorBytes>,
}

impl ProfiledStats {
    pub fn new(
        model: &ModelSpec,
        precision: &PrecisionPlan,
        stage_times: Vec<Vec<f64>>,
        t_sync: f64,
        t_update: f64,
    ) -> Self {
        let operator_bytes = model
            .operators
            .iter()
            .map(|op| OperatorBytes {
                compute: op.param_count * precision.compute_bytes as u64,
                master: op.param_count * precision.master_bytes as u64,
                optim: op.param_count * precision.optimizer_bytes as u64,
            })
            .collect();
        ProfiledStats { stage_times, t_sync, t_update, t_iter_measured: None, operator_bytes }
    }

    pub fn t_iter(&self, plan: &ParallelPlan) -> f64 {
        self.t_iter_measured
            .unwrap_or_else(|| crate::sim::timing::iteration_time(self, plan))
    }

    /// Slowest per-micro-batch stage time across all pipelines.
    pub fn max_stage_time(&self) -> f64 {
        self.stage_times.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn dense_bytes(&self) -> u64 {
        self.operator_bytes.iter().map(|b| b.full()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operator_layout_has_gate_and_non_expert_per_layer() {
        let m = ModelSpec::uniform(3, 4, 2, 10).unwrap();
        assert_eq!(m.operators.len(), 18);
        assert_eq!(m.expert_op(1, 2), OperatorId(8));
        assert_eq!(m.non_expert_op(1), OperatorId(10));
        assert_eq!(m.gate_op(2), OperatorId(17));
        assert!(matches!(m.operators[10].kind, OperatorKind::NonExpert { layer: 1 }));
        assert!(matches!(m.operators[17].kind, OperatorKind::Gate { layer: 2 }));
    }

    #[test]
    fn top_k_bounds() {
        assert!(ModelSpec::uniform(1, 4, 5, 1).is_err());
        assert!(ModelSpec::uniform(1, 4, 0, 1).is_err());
        assert!(ModelSpec::uniform(1, 4, 4, 1).is_ok());
    }

    #[test]
    fn shape_derives_sizes() {
        let shape = ModelShape {
            name: "s".into(),
            layers: 2,
            experts_per_layer: 8,
            top_k: 2,
            shared_experts: 1,
            hidden: 16,
            expert_ffn: 32,
            mlp_matrices: 3,
            attention_params: None,
            expert_capacity: Some(64),
        };
        let m = ModelSpec::from_shape(&shape).unwrap();
        assert_eq!(m.operators[0].param_count, 3 * 16 * 32);
        assert_eq!(m.operators[8].param_count, 4 * 16 * 16 + 3 * 16 * 32);
        assert_eq!(m.operators[9].param_count, 8 * 16);
        assert!(matches!(m.operators[3].kind, OperatorKind::Expert { capacity: 64, .. }));
    }

    #[test]
    fn contiguous_stage_split() {
        let m = ModelSpec::uniform(6, 2, 1, 1).unwrap();
        let p = ParallelPlan::layer_contiguous(&m, 3, 2, 1, 512, 32);
        assert_eq!(p.microbatches, 8);
        assert_eq!(p.stage_of(m.gate_op(0)), Some(0));
        assert_eq!(p.stage_of(m.expert_op(2, 0)), Some(1));
        assert_eq!(p.stage_of(m.non_expert_op(5)), Some(2));
        assert_eq!(p.operators_in_stage(1).count(), 8);
    }
}
