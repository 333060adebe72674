use super::convert::replay_window;
use super::scope::RecoveryScope;
use crate::model::OperatorId;
use crate::train::{DataSource, Engine, LogSet, OperatorState, SparseCheckpoint};
use crate::{Error, Result};

/// Rebuilt state of the stages in a recovery scope.
#[derive(Clone, Debug)]
pub struct RecoveredStages {
    pub iteration: u64,
    pub ops: Vec<(OperatorId, OperatorState)>,
    /// Boundary entries the recovered stages send, regenerated during replay.
    pub logs: LogSet,
}

impl RecoveredStages {
    /// Writes the recovered operators into `state`; nothing else changes.
    pub fn install(&self, state: &mut crate::train::TrainState) {
        for (id, op) in &self.ops {
            state.ops[id.index()] = op.clone();
        }
    }
}

/// Replays only the scope's stages: sparse-to-dense conversion over the
/// checkpoint window, then re-execution up to `progress` completed
/// iterations. Boundary inputs come from the neighbours' logs; the data
/// stream and loss head stand in at the pipeline ends.
///
/// Every data-parallel replica's micro-batches are replayed for the scope's
/// stages, since the replicas share one set of weights.
pub fn localized_recover(
    engine: &Engine,
    scope: &RecoveryScope,
    ckpt: &SparseCheckpoint,
    logs: &LogSet,
    data: &dyn DataSource,
    progress: u64,
) -> Result<RecoveredStages> {
    let ready = ckpt.window_start + ckpt.window_len as u64;
    if ready > progress {
        return Err(Error::invalid(format!(
            "checkpoint window [{}, {ready}) is not complete at iteration {progress}",
            ckpt.window_start
        )));
    }
    let mut out = RecoveredStages { iteration: progress, ops: Vec::new(), logs: LogSet::new(engine.stages()) };
    let mut done: Vec<(u32, u32)> = Vec::new();
    for seg in &scope.segments {
        if done.contains(&(seg.first, seg.last)) {
            continue;
        }
        done.push((seg.first, seg.last));
        let stages = seg.stages();
        let (mut state, modes) = replay_window(engine, ckpt, stages.clone(), data, Some(logs), Some(&mut out.logs))?;
        while state.meta.iteration < progress {
            engine.execute(&mut state, &modes, stages.clone(), data, Some(logs), Some(&mut out.logs))?;
        }
        for id in stages.flat_map(|s| engine.plan.operators_in_stage(s)) {
            out.ops.push((id, state.ops[id.index()].clone()));
        }
    }
    Ok(out)
}
