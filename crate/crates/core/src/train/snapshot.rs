use sha2::{Digest, Sha256};

use super::codec;
use super::engine::{Engine, FullState, Metadata, OperatorState, TrainState};
use super::quantize::quantize;
use super::TensorBuf;
use crate::model::{ClusterSpec, OperatorId, PrecisionPlan, METADATA_BYTES};
use crate::schedule::Slot;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Full(FullState),
    ComputeOnly(TensorBuf),
}

impl Payload {
    /// Bytes charged for this payload under `plan`.
    pub fn accounted_bytes(&self, plan: &PrecisionPlan) -> u64 {
        match self {
            Payload::Full(f) => f.master.len() as u64 * plan.full_bytes() as u64,
            Payload::ComputeOnly(t) => t.len() as u64 * plan.compute_bytes as u64,
        }
    }
}

/// State captured at one iteration boundary of a sparse window.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotRecord {
    /// Captured after `meta.iteration` completed iterations.
    pub meta: Metadata,
    pub slot: u32,
    pub window_start: u64,
    pub window_len: u32,
    pub entries: Vec<(OperatorId, Payload)>,
}

impl SnapshotRecord {
    pub fn accounted_bytes(&self, plan: &PrecisionPlan) -> u64 {
        self.entries.iter().map(|(_, p)| p.accounted_bytes(plan)).sum()
    }

    pub fn full_ids(&self) -> impl Iterator<Item = OperatorId> + '_ {
        self.entries.iter().filter(|(_, p)| matches!(p, Payload::Full(_))).map(|(id, _)| *id)
    }

    pub fn compute_only_ids(&self) -> impl Iterator<Item = OperatorId> + '_ {
        self.entries.iter().filter(|(_, p)| matches!(p, Payload::ComputeOnly(_))).map(|(id, _)| *id)
    }
}

/// Full state for the slot's active operators and compute weights for the
/// operators of later slots.
pub fn take_sparse_snapshot(
    state: &TrainState,
    slot: &Slot,
    slot_index: u32,
    window_start: u64,
    window_len: u32,
) -> Result<SnapshotRecord> {
    let mut entries = Vec::with_capacity(slot.active.len() + slot.compute_only.len());
    for &id in &slot.active {
        let full = state.op(id)?.full.clone().ok_or(Error::MissingFullState(id))?;
        entries.push((id, Payload::Full(full)));
    }
    for &id in &slot.compute_only {
        entries.push((id, Payload::ComputeOnly(state.op(id)?.compute.clone())));
    }
    Ok(SnapshotRecord { meta: state.meta, slot: slot_index, window_start, window_len, entries })
}

/// Full state of every operator plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseCheckpoint {
    pub meta: Metadata,
    pub ops: Vec<FullState>,
}

impl DenseCheckpoint {
    pub fn accounted_bytes(&self, plan: &PrecisionPlan) -> u64 {
        self.ops.iter().map(|f| f.master.len() as u64 * plan.full_bytes() as u64).sum::<u64>() + METADATA_BYTES
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        codec::encode_dense(self)
    }

    /// Restores a state with every operator active.
    pub fn load(&self, plan: &PrecisionPlan) -> Result<TrainState> {
        let ops = self
            .ops
            .iter()
            .map(|f| Ok(OperatorState { compute: quantize(&f.master, plan)?, full: Some(f.clone()) }))
            .collect::<Result<_>>()?;
        Ok(TrainState { ops, meta: self.meta })
    }
}

pub fn take_dense_checkpoint(state: &TrainState) -> Result<DenseCheckpoint> {
    let ops = state
        .ops
        .iter()
        .enumerate()
        .map(|(i, op)| op.full.clone().ok_or(Error::FrozenOperator(OperatorId(i as u32))))
        .collect::<Result<_>>()?;
    Ok(DenseCheckpoint { meta: state.meta, ops })
}

/// One window of encoded records plus their replication counts.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCheckpoint {
    pub window_start: u64,
    pub window_len: u32,
    pub replication_target: u32,
    pub compute_width: u32,
    records: Vec<Vec<u8>>,
    replicas: Vec<u32>,
}

impl SparseCheckpoint {
    pub fn new(window_start: u64, window_len: u32, replication_target: u32, compute_width: u32) -> Self {
        SparseCheckpoint {
            window_start,
            window_len,
            replication_target,
            compute_width,
            records: Vec::new(),
            replicas: Vec::new(),
        }
    }

    pub fn push(&mut self, rec: &SnapshotRecord) -> Result<()> {
        if rec.slot as usize != self.records.len() || rec.window_start != self.window_start {
            return Err(Error::invalid(format!(
                "record for slot {} of window {} does not follow slot {} of window {}",
                rec.slot,
                rec.window_start,
                self.records.len(),
                self.window_start
            )));
        }
        self.records.push(codec::encode_record(rec, self.compute_width)?);
        self.replicas.push(0);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.records.len() == self.window_len as usize
    }

    /// Marks one more peer as holding `slot`.
    pub fn replicate(&mut self, slot: usize) {
        if let Some(r) = self.replicas.get_mut(slot) {
            *r += 1;
        }
    }

    pub fn replication(&self, slot: usize) -> u32 {
        self.replicas.get(slot).copied().unwrap_or(0)
    }

    /// Every record exists and is held by at least the target number of peers.
    pub fn is_persisted(&self) -> bool {
        self.is_complete() && self.replicas.iter().all(|&r| r >= self.replication_target)
    }

    pub fn record(&self, slot: usize) -> Result<SnapshotRecord> {
        let bytes = self.records.get(slot).ok_or(Error::MissingRecord { slot })?;
        if !codec::checksum_ok(bytes) {
            return Err(Error::CorruptRecord { slot });
        }
        let rec = codec::decode_record(bytes)?;
        if rec.slot as usize != slot {
            return Err(Error::CorruptRecord { slot });
        }
        Ok(rec)
    }

    pub fn record_bytes(&self, slot: usize) -> Option<&[u8]> {
        self.records.get(slot).map(|v| v.as_slice())
    }

    /// Flips one payload bit of a stored record; used to exercise the
    /// corruption path.
    pub fn corrupt(&mut self, slot: usize) {
        if let Some(r) = self.records.get_mut(slot) {
            let mid = r.len() / 2;
            r[mid] ^= 0x10;
        }
    }

    /// Removes records from `slot` onward.
    pub fn truncate(&mut self, slot: usize) {
        self.records.truncate(slot);
        self.replicas.truncate(slot);
    }
}

/// Seconds to copy `bytes` from device to host.
pub fn snapshot_cost_model(bytes: u64, cluster: &ClusterSpec) -> f64 {
    bytes as f64 / cluster.pcie_bandwidth
}

/// Digest of the operators assigned to `stage`.
pub fn stage_digest(engine: &Engine, state: &TrainState, stage: u32) -> [u8; 32] {
    let mut h = Sha256::new();
    for id in engine.plan.operators_in_stage(stage) {
        let op = &state.ops[id.index()];
        h.update(id.0.to_le_bytes());
        for x in &op.compute.values {
            h.update(x.to_bits().to_le_bytes());
        }
        if let Some(f) = &op.full {
            h.update(f.step.to_le_bytes());
            for t in [&f.master, &f.m, &f.v] {
                for x in &t.values {
                    h.update(x.to_bits().to_le_bytes());
                }
            }
        }
    }
    h.finalize().into()
}
