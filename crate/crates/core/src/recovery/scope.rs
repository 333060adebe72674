use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::ParallelPlan;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Worker {
    pub stage: u32,
    pub replica: u32,
}

/// A maximal run of failed stages within one data-parallel pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub replica: u32,
    pub first: u32,
    pub last: u32,
    /// Stage holding the activations that enter the segment; `None` at the
    /// pipeline head, where the data stream is used.
    pub upstream: Option<u32>,
    /// Stage holding the gradients that enter the segment; `None` at the
    /// pipeline tail, where the loss head is used.
    pub downstream: Option<u32>,
    /// True when this segment's recovery starts (or starts over) now.
    pub restarted: bool,
}

impl Segment {
    pub fn stages(&self) -> std::ops::RangeInclusive<u32> {
        self.first..=self.last
    }

    pub fn contains(&self, w: Worker) -> bool {
        w.replica == self.replica && (self.first..=self.last).contains(&w.stage)
    }

    pub fn len(&self) -> u32 {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryScope {
    pub segments: Vec<Segment>,
}

impl RecoveryScope {
    pub fn dp_groups(&self) -> BTreeSet<u32> {
        self.segments.iter().map(|s| s.replica).collect()
    }

    pub fn workers(&self) -> impl Iterator<Item = Worker> + '_ {
        self.segments.iter().flat_map(|s| s.stages().map(move |stage| Worker { stage, replica: s.replica }))
    }

    pub fn restarted(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.restarted)
    }

    /// Widest segment, which bounds the time of a parallel recovery.
    pub fn max_len(&self) -> u32 {
        self.segments.iter().map(|s| s.len()).max().unwrap_or(0)
    }
}

/// Groups new failures with any ongoing recoveries into maximal contiguous
/// segments per pipeline. A segment that absorbs a new failure restarts;
/// untouched ongoing segments carry on.
pub fn recovery_scope(failed: &[Worker], plan: &ParallelPlan, ongoing: &[Segment]) -> Result<RecoveryScope> {
    for w in failed {
        if w.stage >= plan.pp_stages || w.replica >= plan.dp_degree {
            return Err(Error::UnknownWorker { stage: w.stage, replica: w.replica });
        }
    }
    let fresh: BTreeSet<Worker> = failed.iter().copied().collect();
    let mut down: BTreeSet<Worker> = fresh.clone();
    for s in ongoing {
        down.extend(s.stages().map(|stage| Worker { stage, replica: s.replica }));
    }
    let last_stage = plan.pp_stages - 1;
    let mut segments = Vec::new();
    let mut iter = down.iter().peekable();
    while let Some(&start) = iter.next() {
        let mut end = start;
        while let Some(&&next) = iter.peek() {
            if next.replica == end.replica && next.stage == end.stage + 1 {
                end = next;
                iter.next();
            } else {
                break;
            }
        }
        let seg_has = |w: &Worker| w.replica == start.replica && (start.stage..=end.stage).contains(&w.stage);
        let prior: Vec<&Segment> = ongoing
            .iter()
            .filter(|s| s.replica == start.replica && s.first >= start.stage && s.last <= end.stage)
            .collect();
        let restarted = fresh.iter().any(seg_has) || prior.len() != 1;
        segments.push(Segment {
            replica: start.replica,
            first: start.stage,
            last: end.stage,
            upstream: (start.stage > 0).then(|| start.stage - 1),
            downstream: (end.stage < last_stage).then(|| end.stage + 1),
            restarted,
        });
    }
    Ok(RecoveryScope { segments })
}
