//! Equivalence checks on the toy engine: each recovery path is compared
//! with an uninterrupted run of the same seed.

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::model::OperatorId;
use crate::recovery::{gc_logs, localized_recover, recovery_scope, sparse_to_dense_convert, Worker};
use crate::schedule::{generate_schedule, order_operators, MocState, OrderingScheme, SparseSchedule};
use crate::train::{
    all_active, stage_digest, take_dense_checkpoint, take_sparse_snapshot, Engine, FullState, LogSet, SeededStream,
    SparseCheckpoint, ToyConfig, TrainState,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyPolicy {
    /// Global sparse-to-dense conversion.
    Sparse,
    /// Sparse conversion of one failed stage from its neighbours' logs.
    Localized,
    /// Restore a dense checkpoint and replay.
    Dense,
    /// Partial-expert snapshots; lossy by design.
    Moc,
}

impl VerifyPolicy {
    pub fn name(self) -> &'static str {
        match self {
            VerifyPolicy::Sparse => "sparse",
            VerifyPolicy::Localized => "localized",
            VerifyPolicy::Dense => "dense",
            VerifyPolicy::Moc => "moc",
        }
    }

    /// Whether a mismatch under this policy is a verification failure.
    pub fn must_match(self) -> bool {
        self != VerifyPolicy::Moc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub toy: ToyConfig,
    /// Window length of the sparse schedule.
    pub window: u32,
    pub seeds: Vec<u64>,
    /// Window start iterations.
    pub positions: Vec<u64>,
    pub policies: Vec<VerifyPolicy>,
    /// Iterations lost after the window completes, re-executed on recovery.
    #[serde(default = "default_lost")]
    pub lost_iterations: u64,
    /// Experts per layer snapshotted each iteration by the partial-expert policy.
    #[serde(default = "default_moc_k")]
    pub moc_k: u32,
    /// Corrupts this record slot before conversion.
    #[serde(default)]
    pub corrupt_slot: Option<usize>,
}

fn default_lost() -> u64 {
    2
}
fn default_moc_k() -> u32 {
    1
}

impl VerifyConfig {
    /// Three layers of four experts over three pipeline stages, window of 3,
    /// 20 seeds and 6 window positions.
    pub fn standard() -> Self {
        let mut toy = ToyConfig::small();
        toy.layers = 3;
        toy.pp_stages = 3;
        toy.dp_degree = 2;
        VerifyConfig {
            toy,
            window: 3,
            seeds: (0..20).collect(),
            positions: vec![0, 1, 2, 4, 7, 11],
            policies: vec![VerifyPolicy::Sparse, VerifyPolicy::Localized, VerifyPolicy::Dense, VerifyPolicy::Moc],
            lost_iterations: 2,
            moc_k: 1,
            corrupt_slot: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    pub position: u64,
    pub policy: VerifyPolicy,
    /// Failed stage for localized cells.
    pub stage: Option<u32>,
    pub matched: bool,
    pub tokens_lost: f64,
    pub detail: String,
}

impl Cell {
    pub fn passed(&self) -> bool {
        self.matched || !self.policy.must_match()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub cells: Vec<Cell>,
}

impl Matrix {
    pub fn all_passed(&self) -> bool {
        self.cells.iter().all(Cell::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| !c.passed())
    }
}

/// Sparse schedule of `w` slots over the engine's operators in id order.
pub fn toy_schedule(engine: &Engine, w: u32) -> Result<SparseSchedule> {
    let ordered = order_operators(&engine.model.operators, OrderingScheme::ById)?;
    let o = (ordered.len() as u32).div_ceil(w.max(1));
    generate_schedule(&ordered, o, OrderingScheme::ById, 0)
}

/// Fault-free run to `until` completed iterations, capturing one sparse
/// window starting at `t0` and, optionally, every boundary log.
pub fn run_with_window(
    engine: &Engine,
    schedule: &SparseSchedule,
    seed: u64,
    t0: u64,
    until: u64,
    logs: Option<&mut LogSet>,
) -> Result<(SparseCheckpoint, TrainState)> {
    let data = stream_for(engine, seed);
    let modes = all_active(engine.num_ops());
    let mut state = engine.init_state(seed)?;
    let mut ckpt = SparseCheckpoint::new(t0, schedule.w, 2, engine.cfg.precision.compute_bytes);
    let mut logs = logs;
    for t in 0..until {
        if (t0..t0 + schedule.w as u64).contains(&t) {
            let k = (t - t0) as usize;
            ckpt.push(&take_sparse_snapshot(&state, &schedule.slots[k], k as u32, t0, schedule.w)?)?;
            ckpt.replicate(k);
            ckpt.replicate(k);
        }
        engine.run_iteration(&mut state, &modes, &data, logs.as_deref_mut())?;
    }
    Ok((ckpt, state))
}

pub fn stream_for(engine: &Engine, seed: u64) -> SeededStream {
    SeededStream { seed, tokens: engine.cfg.tokens_per_microbatch, dim: engine.cfg.dim }
}

fn cell(seed: u64, position: u64, policy: VerifyPolicy) -> Cell {
    Cell { seed, position, policy, stage: None, matched: false, tokens_lost: 0.0, detail: String::new() }
}

fn sparse_cell(cfg: &VerifyConfig, engine: &Engine, seed: u64, t0: u64) -> Result<Cell> {
    let schedule = toy_schedule(engine, cfg.window)?;
    let end = t0 + schedule.w as u64;
    let (mut ckpt, oracle) = run_with_window(engine, &schedule, seed, t0, end, None)?;
    if let Some(slot) = cfg.corrupt_slot {
        ckpt.corrupt(slot);
    }
    let mut c = cell(seed, t0, VerifyPolicy::Sparse);
    let want = take_dense_checkpoint(&oracle)?.encode()?;
    match sparse_to_dense_convert(engine, &ckpt, &stream_for(engine, seed)) {
        Ok(got) => {
            let got = got.encode()?;
            c.matched = got == want;
            c.detail = format!("{} of {} bytes differ", diff_bytes(&got, &want), want.len());
        }
        Err(e) => c.detail = e.to_string(),
    }
    Ok(c)
}

fn dense_cell(engine: &Engine, seed: u64, t0: u64, w: u32) -> Result<Cell> {
    let data = stream_for(engine, seed);
    let modes = all_active(engine.num_ops());
    let mut state = engine.init_state(seed)?;
    let mut saved = None;
    for t in 0..t0 + w as u64 {
        if t == t0 {
            saved = Some(take_dense_checkpoint(&state)?.encode()?);
        }
        engine.run_iteration(&mut state, &modes, &data, None)?;
    }
    let saved = saved.unwrap_or(take_dense_checkpoint(&state)?.encode()?);
    let mut restored = crate::train::codec::decode_dense(&saved)?.load(&engine.cfg.precision)?;
    while restored.meta.iteration < state.meta.iteration {
        engine.run_iteration(&mut restored, &modes, &data, None)?;
    }
    let mut c = cell(seed, t0, VerifyPolicy::Dense);
    let (got, want) = (take_dense_checkpoint(&restored)?.encode()?, take_dense_checkpoint(&state)?.encode()?);
    c.matched = got == want;
    c.detail = format!("{} of {} bytes differ", diff_bytes(&got, &want), want.len());
    Ok(c)
}

fn localized_cells(cfg: &VerifyConfig, engine: &Engine, seed: u64, t0: u64) -> Result<Vec<Cell>> {
    let schedule = toy_schedule(engine, cfg.window)?;
    let progress = t0 + schedule.w as u64 + cfg.lost_iterations;
    let mut logs = LogSet::new(engine.stages());
    let (ckpt, oracle) = run_with_window(engine, &schedule, seed, t0, progress, Some(&mut logs))?;
    gc_logs(&mut logs, ckpt.window_start);
    let data = stream_for(engine, seed);
    let mut out = Vec::new();
    for stage in 0..engine.stages() {
        let mut c = cell(seed, t0, VerifyPolicy::Localized);
        c.stage = Some(stage);
        let scope = recovery_scope(&[Worker { stage, replica: 0 }], &engine.plan, &[])?;
        let mut live = oracle.clone();
        let others: Vec<[u8; 32]> =
            (0..engine.stages()).filter(|s| *s != stage).map(|s| stage_digest(engine, &live, s)).collect();
        // The failed stage's state is gone; recovery must not read it.
        for id in engine.plan.operators_in_stage(stage) {
            live.ops[id.index()].full = None;
            live.ops[id.index()].compute.values.iter_mut().for_each(|v| *v = f32::NAN);
        }
        match localized_recover(engine, &scope, &ckpt, &logs, &data, progress) {
            Ok(rec) => {
                rec.install(&mut live);
                let after: Vec<[u8; 32]> =
                    (0..engine.stages()).filter(|s| *s != stage).map(|s| stage_digest(engine, &live, s)).collect();
                let same_stage = stage_digest(engine, &live, stage) == stage_digest(engine, &oracle, stage);
                c.matched = same_stage && after == others;
                c.detail = format!("stage state {}, other stages {}", verdict(same_stage), verdict(after == others));
            }
            Err(e) => c.detail = e.to_string(),
        }
        out.push(c);
    }
    Ok(out)
}

fn moc_cell(cfg: &VerifyConfig, engine: &Engine, seed: u64, t0: u64) -> Result<Cell> {
    let data = stream_for(engine, seed);
    let modes = all_active(engine.num_ops());
    let fail_at = t0 + cfg.window as u64;
    let mut moc = MocState::new(engine.cfg.layers, engine.cfg.experts, cfg.moc_k, 0.01);
    let mut state = engine.init_state(seed)?;
    let mut latest: Vec<FullState> = take_dense_checkpoint(&state)?.ops;
    let mut snap_iter = vec![0u64; engine.num_ops()];
    let mut routed: Vec<Vec<u64>> = Vec::new();
    while state.meta.iteration < fail_at {
        let t = state.meta.iteration;
        for id in moc.step_operators(&engine.model, t) {
            latest[id.index()] = state.ops[id.index()].full.clone().ok_or(Error::MissingFullState(id))?;
            snap_iter[id.index()] = t;
        }
        routed.push(engine.routing_counts(&state, &data)?);
        engine.run_iteration(&mut state, &modes, &data, None)?;
    }
    // Roll every operator back to its newest snapshot, then replay from the
    // newest non-expert snapshot as if it were consistent.
    let resume = snap_iter.iter().copied().max().unwrap_or(0);
    let mut restored = state.clone();
    restored.meta.iteration = resume;
    restored.meta.data_cursor = resume;
    for (i, f) in latest.iter().enumerate() {
        restored.ops[i] = engine.fresh_op(f.master.clone())?;
        restored.ops[i].full = Some(f.clone());
    }
    let mut lost = 0.0;
    for (i, &s) in snap_iter.iter().enumerate() {
        if engine.model.operators[i].kind.is_expert() {
            lost += routed[s as usize..resume as usize].iter().map(|c| c[i] as f64).sum::<f64>();
        }
    }
    while restored.meta.iteration < state.meta.iteration {
        engine.run_iteration(&mut restored, &modes, &data, None)?;
    }
    let mut c = cell(seed, t0, VerifyPolicy::Moc);
    let (got, want) = (take_dense_checkpoint(&restored)?.encode()?, take_dense_checkpoint(&state)?.encode()?);
    c.matched = got == want;
    c.tokens_lost = lost;
    c.detail = format!("{} of {} bytes differ, {lost} expert tokens lost", diff_bytes(&got, &want), want.len());
    Ok(c)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "identical"
    } else {
        "DIFFERENT"
    }
}

fn diff_bytes(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len())
}

/// Runs every (seed, position, policy) cell. Cells are independent and run
/// under `exec`; the output order is fixed.
pub fn run_matrix(cfg: &VerifyConfig, exec: Execution) -> Result<Matrix> {
    let engine = Engine::new(cfg.toy.clone())?;
    let jobs: Vec<(u64, u64, VerifyPolicy)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.positions.iter().flat_map(move |&p| cfg.policies.iter().map(move |&pol| (s, p, pol))))
        .collect();
    let results = exec.map(&jobs, |&(seed, t0, policy)| -> Result<Vec<Cell>> {
        Ok(match policy {
            VerifyPolicy::Sparse => vec![sparse_cell(cfg, &engine, seed, t0)?],
            VerifyPolicy::Dense => vec![dense_cell(&engine, seed, t0, cfg.window)?],
            VerifyPolicy::Localized => localized_cells(cfg, &engine, seed, t0)?,
            VerifyPolicy::Moc => vec![moc_cell(cfg, &engine, seed, t0)?],
        })
    });
    let mut cells = Vec::new();
    for r in results {
        cells.extend(r?);
    }
    Ok(Matrix { cells })
}

/// Operators whose full state differs between two states.
pub fn differing_operators(a: &TrainState, b: &TrainState) -> Vec<OperatorId> {
    a.ops
        .iter()
        .zip(&b.ops)
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(i, _)| OperatorId(i as u32))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyConfig {
        let mut c = VerifyConfig::standard();
        c.seeds = vec![1, 2];
        c.positions = vec![0, 3];
        c
    }

    #[test]
    fn quick_matrix_passes() {
        let m = run_matrix(&quick(), Execution::Sequential).unwrap();
        assert!(m.all_passed(), "{:?}", m.failures().next());
        assert_eq!(m.cells.len(), 2 * 2 * (1 + 3 + 1 + 1));
        assert!(m.cells.iter().filter(|c| c.policy == VerifyPolicy::Moc).all(|c| c.tokens_lost > 0.0 && !c.matched));
    }

    #[test]
    fn corruption_is_reported() {
        let mut c = quick();
        c.policies = vec![VerifyPolicy::Sparse];
        c.corrupt_slot = Some(1);
        let m = run_matrix(&c, Execution::Sequential).unwrap();
        assert!(!m.all_passed());
        assert!(m.cells[0].detail.contains("slot 1"), "{}", m.cells[0].detail);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let a = run_matrix(&quick(), Execution::Sequential).unwrap();
        let b = run_matrix(&quick(), Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
