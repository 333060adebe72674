use std::fmt;

use super::{ClusterSpec, ModelSpec, OperatorId, ParallelPlan};
use crate::{Error, Result};

/// One inconsistency found by [`validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    UnmappedOperator(OperatorId),
    StageOutOfRange { op: OperatorId, stage: u32, stages: u32 },
    UnknownStageEntry { index: usize },
    MicrobatchMismatch { microbatches: u32, microbatch_size: u32, global_batch: u32, dp_degree: u32 },
    MissingNccl { group_size: u32 },
    NonPositive { field: &'static str },
    TopK { top_k: u32, experts: u32 },
    OperatorCount { expected: usize, found: usize },
    ZeroParams(OperatorId),
    GpuCount { required: u32, available: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnmappedOperator(id) => write!(f, "plan.stage_map: unmapped operator {id}"),
            Violation::StageOutOfRange { op, stage, stages } => {
                write!(f, "plan.stage_map: operator {op} assigned to stage {stage} of {stages}")
            }
            Violation::UnknownStageEntry { index } => {
                write!(f, "plan.stage_map: entry {index} has no matching operator")
            }
            Violation::MicrobatchMismatch { microbatches, microbatch_size, global_batch, dp_degree } => write!(
                f,
                "plan.microbatches: {microbatches}x{microbatch_size} = {} != {global_batch}/{dp_degree} = {}",
                microbatches * microbatch_size,
                global_batch / dp_degree.max(&1)
            ),
            Violation::MissingNccl { group_size } => {
                write!(f, "cluster.nccl: no coefficients for group size {group_size}")
            }
            Violation::NonPositive { field } => write!(f, "{field}: must be positive"),
            Violation::TopK { top_k, experts } => {
                write!(f, "model.top_k: {top_k} outside 1..={experts}")
            }
            Violation::OperatorCount { expected, found } => {
                write!(f, "model.operators: {found} entries, expected {expected}")
            }
            Violation::ZeroParams(id) => write!(f, "model.operators: {id} has no parameters"),
            Violation::GpuCount { required, available } => {
                write!(f, "cluster.gpus: plan needs {required}, cluster has {available}")
            }
        }
    }
}

/// A configuration that passed [`validate`].
#[derive(Clone, Copy, Debug)]
pub struct Validated<'a> {
    pub model: &'a ModelSpec,
    pub plan: &'a ParallelPlan,
    pub cluster: &'a ClusterSpec,
}

/// Collects every violation rather than stopping at the first.
pub fn validate<'a>(
    model: &'a ModelSpec,
    plan: &'a ParallelPlan,
    cluster: &'a ClusterSpec,
) -> Result<Validated<'a>> {
    let mut v = Vec::new();

    if model.top_k == 0 || model.top_k > model.experts_per_layer {
        v.push(Violation::TopK { top_k: model.top_k, experts: model.experts_per_layer });
    }
    let expected = (model.layers * (model.experts_per_layer + 2)) as usize;
    if model.operators.len() != expected {
        v.push(Violation::OperatorCount { expected, found: model.operators.len() });
    }
    for op in &model.operators {
        if op.param_count == 0 {
            v.push(Violation::ZeroParams(op.id));
        }
        match plan.stage_of(op.id) {
            None => v.push(Violation::UnmappedOperator(op.id)),
            Some(s) if s >= plan.pp_stages => {
                v.push(Violation::StageOutOfRange { op: op.id, stage: s, stages: plan.pp_stages })
            }
            Some(_) => {}
        }
    }
    for index in model.operators.len()..plan.stage_map.len() {
        v.push(Violation::UnknownStageEntry { index });
    }

    for (field, value) in [
        ("plan.pp_stages", plan.pp_stages),
        ("plan.dp_degree", plan.dp_degree),
        ("plan.ep_degree", plan.ep_degree),
        ("plan.microbatches", plan.microbatches),
        ("plan.microbatch_size", plan.microbatch_size),
        ("plan.global_batch", plan.global_batch),
        ("cluster.nodes", cluster.nodes),
        ("cluster.gpus_per_node", cluster.gpus_per_node),
    ] {
        if value == 0 {
            v.push(Violation::NonPositive { field });
        }
    }
    if plan.dp_degree > 0
        && (!plan.global_batch.is_multiple_of(plan.dp_degree)
            || plan.microbatches * plan.microbatch_size != plan.global_batch / plan.dp_degree)
    {
        v.push(Violation::MicrobatchMismatch {
            microbatches: plan.microbatches,
            microbatch_size: plan.microbatch_size,
            global_batch: plan.global_batch,
            dp_degree: plan.dp_degree,
        });
    }

    for (field, value) in [
        ("cluster.pcie_bandwidth", cluster.pcie_bandwidth),
        ("cluster.replication_bandwidth", cluster.replication_bandwidth),
        ("cluster.persist_bandwidth", cluster.persist_bandwidth),
    ] {
        if !(value > 0.0) {
            v.push(Violation::NonPositive { field });
        }
    }
    if cluster.cpu_mem_per_node == 0 {
        v.push(Violation::NonPositive { field: "cluster.cpu_mem_per_node" });
    }
    let required = plan.pp_stages * plan.dp_degree;
    if required > cluster.gpus() && cluster.gpus() > 0 {
        v.push(Violation::GpuCount { required, available: cluster.gpus() });
    }

    let mut groups = vec![plan.dp_degree, plan.pp_stages];
    if plan.ep_degree > 1 {
        groups.push(plan.ep_degree);
    }
    groups.sort_unstable();
    groups.dedup();
    for p in groups.into_iter().filter(|p| *p > 1) {
        if !cluster.nccl.contains_key(&p) {
            v.push(Violation::MissingNccl { group_size: p });
        }
    }

    if v.is_empty() {
        Ok(Validated { model, plan, cluster })
    } else {
        Err(Error::Invalid(v))
    }
}
