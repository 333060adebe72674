use std::ops::RangeInclusive;

use crate::model::OperatorId;
use crate::train::quantize::quantize;
use crate::train::{
    take_dense_checkpoint, DataSource, DenseCheckpoint, Engine, LogSet, OperatorMode, OperatorState, Payload,
    SparseCheckpoint, TrainState,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConversionStep {
    pub record_slot: usize,
    pub replay_iteration: u64,
    /// Operators that become active when this step's record is loaded.
    pub activated: Vec<OperatorId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConversionPlan {
    pub window_start: u64,
    pub steps: Vec<ConversionStep>,
}

pub fn conversion_plan(ckpt: &SparseCheckpoint) -> Result<ConversionPlan> {
    let steps = (0..ckpt.window_len as usize)
        .map(|k| {
            let rec = ckpt.record(k)?;
            Ok(ConversionStep {
                record_slot: k,
                replay_iteration: ckpt.window_start + k as u64 + 1,
                activated: rec.full_ids().collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ConversionPlan { window_start: ckpt.window_start, steps })
}

/// Loads each record of the window in turn and replays the following
/// iteration over `segment`, so every operator of the segment ends active
/// and current as of `window_start + W`.
///
/// `read` supplies boundary inputs for segments that do not start at stage
/// 0 or end at the last stage; entries the segment sends go to `write`.
pub(crate) fn replay_window(
    engine: &Engine,
    ckpt: &SparseCheckpoint,
    segment: RangeInclusive<u32>,
    data: &dyn DataSource,
    read: Option<&LogSet>,
    mut write: Option<&mut LogSet>,
) -> Result<(TrainState, Vec<OperatorMode>)> {
    let w = ckpt.window_len as usize;
    if w == 0 {
        return Err(Error::MissingRecord { slot: 0 });
    }
    let first = ckpt.record(0)?;
    let n = engine.num_ops();
    let mut ops: Vec<Option<OperatorState>> = vec![None; n];
    let mut modes = vec![OperatorMode::Frozen; n];
    let precision = &engine.cfg.precision;

    for k in 0..w {
        let rec = if k == 0 { first.clone() } else { ckpt.record(k)? };
        if rec.meta.iteration != ckpt.window_start + k as u64 {
            return Err(Error::invalid(format!(
                "record {k} was captured at iteration {}, expected {}",
                rec.meta.iteration,
                ckpt.window_start + k as u64
            )));
        }
        for (id, payload) in rec.entries {
            let i = id.index();
            if i >= n {
                return Err(Error::UnknownOperator(id));
            }
            match payload {
                Payload::Full(f) => {
                    if modes[i] == OperatorMode::Active {
                        return Err(Error::invalid(format!("operator {id} has two full snapshots in one window")));
                    }
                    ops[i] = Some(OperatorState { compute: quantize(&f.master, precision)?, full: Some(f) });
                    modes[i] = OperatorMode::Active;
                }
                Payload::ComputeOnly(t) => {
                    if modes[i] == OperatorMode::Active {
                        return Err(Error::invalid(format!("active operator {id} received compute weights")));
                    }
                    ops[i] = Some(OperatorState { compute: t, full: None });
                }
            }
        }
        if k == 0 {
            if let Some(i) = ops.iter().position(Option::is_none) {
                return Err(Error::invalid(format!("first record does not cover op{i}")));
            }
        }
        let mut state = TrainState { ops: ops.iter().map(|o| o.clone().unwrap()).collect(), meta: rec.meta };
        engine.execute(&mut state, &modes, segment.clone(), data, read, write.as_deref_mut())?;
        if k + 1 == w {
            for id in segment.clone().flat_map(|s| engine.plan.operators_in_stage(s)) {
                if modes[id.index()] != OperatorMode::Active {
                    return Err(Error::invalid(format!("operator {id} never received a full snapshot")));
                }
            }
            return Ok((state, modes));
        }
        for (slot, op) in ops.iter_mut().zip(state.ops) {
            *slot = Some(op);
        }
    }
    unreachable!("loop returns on its final step")
}

/// Rebuilds the dense checkpoint at `window_start + W` from a sparse window.
pub fn sparse_to_dense_convert(engine: &Engine, ckpt: &SparseCheckpoint, data: &dyn DataSource) -> Result<DenseCheckpoint> {
    let (state, _) = replay_window(engine, ckpt, 0..=engine.stages() - 1, data, None, None)?;
    take_dense_checkpoint(&state)
}
