use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::failures::{inject_failures, FailureProcess, FailureTrace};
use super::policy::CostModel;
use super::timing::pipeline_time;
use crate::model::{ClusterSpec, ModelSpec, ParallelPlan, ProfiledStats};
use crate::recovery::{recovery_scope, Worker};
use crate::schedule::PolicyState;
use crate::train::data::stream;
use crate::{Error, Result};

const FAIL_TAG: u64 = 0x6661_696c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: ModelSpec,
    pub cluster: ClusterSpec,
    pub plan: ParallelPlan,
    pub profile: ProfiledStats,
    pub policy: PolicyState,
    pub failures: FailureProcess,
    pub horizon: f64,
    pub t_restart: f64,
    pub detection_delay: f64,
    pub seed: u64,
    /// Replay only the failed stages from boundary logs (sparse policy).
    pub upstream_logging: bool,
    pub goodput_bucket: f64,
    pub tokens_per_sample: u64,
    /// Per-expert token shares for stale-expert loss; uniform when empty.
    pub popularity: Vec<f64>,
}

impl SimConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.t_restart >= 0.0 && self.detection_delay >= 0.0) {
            return Err(Error::Config("restart and detection delays must be non-negative".into()));
        }
        if !(self.goodput_bucket > 0.0) {
            return Err(Error::Config("goodput bucket must be positive".into()));
        }
        if self.plan.pp_stages == 0 || self.plan.dp_degree == 0 {
            return Err(Error::Config("plan needs at least one stage and one replica".into()));
        }
        if !self.popularity.is_empty() && self.popularity.len() != self.model.experts_per_layer as usize {
            return Err(Error::Config(format!(
                "popularity has {} entries for {} experts",
                self.popularity.len(),
                self.model.experts_per_layer
            )));
        }
        Ok(())
    }
}

/// One failure and the recovery it triggered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryEvent {
    pub t: f64,
    pub node: u32,
    /// Training state the recovery rolls back to.
    pub target: u64,
    /// Frontier at failure time minus the restore point.
    pub lost_iterations: u64,
    /// Partial iteration (or partial recovery) cut off by the failure.
    pub wasted_seconds: f64,
    /// Detection, restart and state load.
    pub fixed_seconds: f64,
    /// Planned replay from the restore point back to the frontier.
    pub replay_seconds: f64,
    pub tokens_lost: f64,
    /// Arrived while an earlier recovery was still running.
    pub cascaded: bool,
    /// Cut short by a later failure or by the horizon.
    pub interrupted: bool,
}

impl RecoveryEvent {
    /// Lost work plus replay, the quantity bounded per policy.
    pub fn rollback_seconds(&self) -> f64 {
        self.wasted_seconds + self.replay_seconds
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodputBucket {
    pub start: f64,
    pub samples_per_s: f64,
    /// Share of experts each snapshot captures at bucket end; 1 for policies
    /// that cover every expert.
    pub expert_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub model: String,
    pub policy: String,
    pub ettr: f64,
    pub useful_iterations: u64,
    pub wall: f64,
    pub useful_time: f64,
    pub stall_time: f64,
    pub recovery_time: f64,
    pub idle_time: f64,
    pub t_iter: f64,
    /// Window length for the sparse policy, interval for dense ones, 1 for
    /// per-iteration partial snapshots.
    pub wsparse_or_interval: u64,
    pub overhead_s_per_iter: f64,
    pub overhead_pct: f64,
    pub failures: usize,
    pub tokens_lost: f64,
    pub checkpoints: u64,
    pub goodput: Vec<GoodputBucket>,
    pub recoveries: Vec<RecoveryEvent>,
    /// `(time, value)` after each change of the checkpointed-expert fraction
    /// or interval.
    pub trajectory: Vec<(f64, f64)>,
}

impl Metrics {
    /// `useful + stall + recovery + idle - wall`, zero up to rounding.
    pub fn accounting_gap(&self) -> f64 {
        self.useful_time + self.stall_time + self.recovery_time + self.idle_time - self.wall
    }

    pub fn recovery_total(&self) -> f64 {
        self.recovery_time
    }

    pub fn mean_goodput(&self) -> f64 {
        if self.goodput.is_empty() {
            return 0.0;
        }
        let (mut samples, mut span) = (0.0, 0.0);
        for (i, b) in self.goodput.iter().enumerate() {
            let end = self.goodput.get(i + 1).map_or(self.wall, |n| n.start);
            samples += b.samples_per_s * (end - b.start);
            span += end - b.start;
        }
        if span > 0.0 {
            samples / span
        } else {
            0.0
        }
    }
}

/// Metrics CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub policy: String,
    pub mtbf_s: f64,
    pub wsparse_or_interval: u64,
    pub overhead_s_per_iter: f64,
    pub overhead_pct: f64,
    pub recovery_total_s: f64,
    pub ettr: f64,
    pub tokens_lost: f64,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 9] = [
        "model",
        "policy",
        "mtbf_s",
        "wsparse_or_interval",
        "overhead_s_per_iter",
        "overhead_pct",
        "recovery_total_s",
        "ettr",
        "tokens_lost",
    ];

    pub fn new(m: &Metrics, mtbf_s: f64) -> Self {
        MetricsRow {
            model: m.model.clone(),
            policy: m.policy.clone(),
            mtbf_s,
            wsparse_or_interval: m.wsparse_or_interval,
            overhead_s_per_iter: m.overhead_s_per_iter,
            overhead_pct: m.overhead_pct,
            recovery_total_s: m.recovery_time,
            ettr: m.ettr,
            tokens_lost: m.tokens_lost,
        }
    }

    pub fn fields(&self) -> [String; 9] {
        [
            self.model.clone(),
            self.policy.clone(),
            format!("{}", self.mtbf_s),
            self.wsparse_or_interval.to_string(),
            format!("{:.6}", self.overhead_s_per_iter),
            format!("{:.4}", self.overhead_pct),
            format!("{:.3}", self.recovery_total_s),
            format!("{:.6}", self.ettr),
            format!("{:.1}", self.tokens_lost),
        ]
    }
}

/// Snapshots waiting for or done with replication, keyed by the training
/// state they capture.
struct Store {
    channel_free: f64,
    bandwidth: f64,
    done: BTreeMap<u64, f64>,
}

impl Store {
    fn push(&mut self, state: u64, ready: f64, bytes: u64) {
        let done = ready.max(self.channel_free) + bytes as f64 / self.bandwidth;
        self.channel_free = done;
        self.done.insert(state, done);
    }

    /// Drops copies a failure at `t` interrupted.
    fn cancel_after(&mut self, t: f64) {
        self.done.retain(|_, d| *d <= t);
        self.channel_free = self.channel_free.min(t);
    }

    fn prune_below(&mut self, state: u64) {
        self.done = self.done.split_off(&state);
    }
}

enum Plan {
    Sparse { slot_bytes: Vec<u64>, w: u64 },
    Dense { interval: u64, durable: bool },
    Moc,
}

struct Run<'a> {
    cfg: &'a SimConfig,
    costs: CostModel,
    plan: Plan,
    policy: PolicyState,
    store: Store,
    p: Vec<f64>,
    /// Experts captured by each partial snapshot, keyed by state.
    moc_log: BTreeMap<u64, Vec<u32>>,
    checkpoints: u64,
    trajectory: Vec<(f64, f64)>,
}

impl<'a> Run<'a> {
    /// Payload snapshotted while executing the iteration from `state`.
    fn snapshot_bytes(&mut self, state: u64) -> Option<u64> {
        match &self.plan {
            Plan::Sparse { slot_bytes, w } => Some(slot_bytes[(state % w) as usize]),
            Plan::Dense { interval, .. } => (state > 0 && state.is_multiple_of(*interval)).then_some(self.costs.dense_bytes),
            Plan::Moc => {
                let PolicyState::Moc(moc) = &mut self.policy else { unreachable!() };
                let picked = moc.step(state);
                let (model, bytes) = (&self.cfg.model, &self.cfg.profile.operator_bytes);
                let mut total = 0;
                for l in 0..model.layers {
                    total += picked.iter().map(|&e| bytes[model.expert_op(l, e).index()].full()).sum::<u64>();
                    total += bytes[model.non_expert_op(l).index()].full() + bytes[model.gate_op(l).index()].full();
                }
                self.moc_log.insert(state, picked);
                Some(total)
            }
        }
    }

    /// Tokens routed to each expert since its latest snapshot at or before
    /// `target`, weighted by popularity.
    fn stale_tokens(&self, target: u64, tokens_per_iter: f64) -> f64 {
        let mut last: Vec<Option<u64>> = vec![None; self.p.len()];
        let mut missing = last.len();
        for (&s, picked) in self.moc_log.range(..=target).rev() {
            for &e in picked {
                if last[e as usize].is_none() {
                    last[e as usize] = Some(s);
                    missing -= 1;
                }
            }
            if missing == 0 {
                break;
            }
        }
        last.iter()
            .zip(&self.p)
            .map(|(l, share)| (target - l.unwrap_or(0)) as f64 * tokens_per_iter * share)
            .sum()
    }

    /// Latest state every needed record of which is replicated.
    fn restore_point(&self, frontier: u64) -> u64 {
        match &self.plan {
            Plan::Sparse { w, .. } => {
                let mut t0 = (frontier.saturating_sub(*w) / w) * w;
                loop {
                    if t0 + w <= frontier && (t0..t0 + w).all(|s| self.store.done.contains_key(&s)) {
                        return t0;
                    }
                    if t0 == 0 {
                        return 0;
                    }
                    t0 -= w;
                }
            }
            Plan::Dense { .. } | Plan::Moc => self.store.done.range(..=frontier).next_back().map_or(0, |(&s, _)| s),
        }
    }

    fn load_time(&self, scope_share: f64) -> f64 {
        match &self.plan {
            Plan::Sparse { slot_bytes, .. } => {
                slot_bytes.iter().sum::<u64>() as f64 * scope_share / self.costs.replication_bandwidth
            }
            Plan::Dense { durable: true, .. } => self.costs.dense_bytes as f64 / self.costs.persist_bandwidth,
            Plan::Dense { durable: false, .. } | Plan::Moc => {
                self.costs.dense_bytes as f64 / self.costs.replication_bandwidth
            }
        }
    }

    /// Seconds to re-execute one iteration given the failed workers.
    fn replay_iteration(&self, failed: &BTreeSet<Worker>) -> Result<(f64, f64)> {
        let plan = &self.cfg.plan;
        let workers = (plan.pp_stages * plan.dp_degree) as f64;
        if !(self.cfg.upstream_logging && matches!(self.plan, Plan::Sparse { .. })) {
            return Ok((self.costs.t_iter, 1.0));
        }
        let failed: Vec<Worker> = failed.iter().copied().collect();
        let scope = recovery_scope(&failed, plan, &[])?;
        let rows = &self.cfg.profile.stage_times;
        let mut worst: f64 = 0.0;
        for s in &scope.segments {
            let row = &rows[s.replica as usize % rows.len()];
            let times = &row[s.first as usize..=s.last as usize];
            worst = worst.max(pipeline_time(times, plan.microbatches) + self.cfg.profile.t_update);
        }
        Ok((worst, scope.workers().count() as f64 / workers))
    }

    /// Replay re-captures the snapshots between the restore point and the
    /// frontier; they count as persisted once recovery ends.
    fn resnapshot(&mut self, target: u64, frontier: u64, at: f64) {
        let keep = match &self.plan {
            Plan::Sparse { .. } => 1,
            Plan::Dense { interval, .. } => *interval,
            Plan::Moc => return,
        };
        for s in (target + 1..frontier).filter(|s| s % keep == 0) {
            self.store.done.entry(s).or_insert(at);
        }
        self.store.channel_free = self.store.channel_free.max(at);
    }

    fn record(&mut self, t: f64, value: f64) {
        if self.trajectory.last().map(|x| x.1) != Some(value) {
            self.trajectory.push((t, value));
        }
    }

    fn trajectory_value(&self) -> f64 {
        match (&self.plan, &self.policy) {
            (Plan::Moc, PolicyState::Moc(m)) => m.fraction(),
            (Plan::Sparse { w, .. }, _) => *w as f64,
            (Plan::Dense { interval, .. }, _) => *interval as f64,
            _ => 0.0,
        }
    }
}

/// Workers (pipeline stage of one replica) hosted at least partly on `node`.
pub fn workers_on_node(node: u32, cluster: &ClusterSpec, plan: &ParallelPlan) -> Vec<Worker> {
    let ws = (plan.pp_stages * plan.dp_degree) as u64;
    let gpus = cluster.gpus().max(1) as u64;
    let g0 = node as u64 * cluster.gpus_per_node as u64;
    let g1 = (g0 + cluster.gpus_per_node as u64).min(gpus);
    let first = (g0 * ws / gpus).min(ws - 1);
    let last = ((g1 * ws).div_ceil(gpus)).clamp(first + 1, ws) - 1;
    (first..=last)
        .map(|w| Worker { stage: (w % plan.pp_stages as u64) as u32, replica: (w / plan.pp_stages as u64) as u32 })
        .collect()
}

struct Clock {
    now: f64,
    useful: f64,
    stall: f64,
    recovery: f64,
    idle: f64,
}

/// Runs one deterministic failure/recovery simulation.
pub fn run_simulation(cfg: &SimConfig) -> Result<Metrics> {
    cfg.check()?;
    let costs = CostModel::new(&cfg.cluster, &cfg.plan, &cfg.profile)?;
    let trace = inject_failures(&cfg.failures, cfg.horizon, cfg.cluster.nodes, &mut stream(cfg.seed, &[FAIL_TAG]))?;
    run_with_trace(cfg, &costs, &trace)
}

/// Same as [`run_simulation`] with the failure events given.
pub fn run_with_trace(cfg: &SimConfig, costs: &CostModel, trace: &FailureTrace) -> Result<Metrics> {
    cfg.check()?;
    let (plan, bandwidth) = match &cfg.policy {
        PolicyState::Sparse(s) => {
            let slot_bytes: Vec<u64> = s.slots.iter().map(|sl| sl.bytes(&cfg.profile.operator_bytes)).collect();
            if slot_bytes.is_empty() {
                return Err(Error::Config("sparse schedule has no slots".into()));
            }
            (Plan::Sparse { w: slot_bytes.len() as u64, slot_bytes }, costs.replication_bandwidth)
        }
        PolicyState::CheckFreq { interval, .. } => {
            (Plan::Dense { interval: (*interval).max(1), durable: true }, costs.persist_bandwidth)
        }
        PolicyState::GeminiOracle { interval } => {
            (Plan::Dense { interval: (*interval).max(1), durable: false }, costs.replication_bandwidth)
        }
        PolicyState::Moc(_) => (Plan::Moc, costs.replication_bandwidth),
    };
    let e = cfg.model.experts_per_layer.max(1) as usize;
    let p = if cfg.popularity.is_empty() { vec![1.0 / e as f64; e] } else { cfg.popularity.clone() };
    let mut run = Run {
        cfg,
        costs: *costs,
        plan,
        policy: cfg.policy.clone(),
        store: Store { channel_free: 0.0, bandwidth, done: BTreeMap::new() },
        p,
        moc_log: BTreeMap::new(),
        checkpoints: 0,
        trajectory: Vec::new(),
    };
    let v = run.trajectory_value();
    run.record(0.0, v);

    let t_iter = costs.t_iter;
    let samples_per_iter = cfg.plan.global_batch as f64;
    let tokens_per_iter = samples_per_iter * cfg.tokens_per_sample as f64;
    let buckets = (cfg.horizon / cfg.goodput_bucket).ceil().max(1.0) as usize;
    let mut samples = vec![0.0; buckets];
    let mut clock = Clock { now: 0.0, useful: 0.0, stall: 0.0, recovery: 0.0, idle: 0.0 };
    let mut frontier: u64 = 0;
    let mut next = 0usize;
    let mut events: Vec<RecoveryEvent> = Vec::new();
    let horizon = cfg.horizon;
    let fail_at = |i: usize| trace.events.get(i).map_or(f64::INFINITY, |e| e.t);

    while clock.now < horizon {
        let bytes = run.snapshot_bytes(frontier);
        if let Some(b) = bytes {
            // At most one copy may wait behind the one in flight.
            let wait = run.store.channel_free - (clock.now + costs.copy_time(b));
            if wait > 0.0 {
                let until = (clock.now + wait).min(horizon);
                if fail_at(next) < until {
                    let tf = fail_at(next);
                    clock.idle += tf - clock.now;
                    clock.now = tf;
                    recover(&mut run, &mut clock, trace, &mut next, frontier, 0.0, &mut events, tokens_per_iter)?;
                    continue;
                }
                clock.idle += until - clock.now;
                clock.now = until;
                if clock.now >= horizon {
                    break;
                }
            }
        }
        let stall = bytes.map_or(0.0, |b| costs.stall(b));
        let dur = t_iter + stall;
        let start = clock.now;
        if let Some(b) = bytes {
            run.store.push(frontier, start + costs.copy_time(b), b);
            run.checkpoints += 1;
        }
        let tf = fail_at(next);
        if tf < start + dur {
            let wasted = tf - start;
            clock.recovery += wasted;
            clock.now = tf;
            recover(&mut run, &mut clock, trace, &mut next, frontier, wasted, &mut events, tokens_per_iter)?;
            continue;
        }
        if start + dur > horizon {
            let part = horizon - start;
            clock.useful += part * t_iter / dur;
            clock.stall += part * stall / dur;
            clock.now = horizon;
            break;
        }
        clock.useful += t_iter;
        clock.stall += stall;
        clock.now = start + dur;
        frontier += 1;
        if let PolicyState::Moc(m) = &mut run.policy {
            m.add_processed(tokens_per_iter);
        }
        let b = ((clock.now / cfg.goodput_bucket) as usize).min(buckets - 1);
        samples[b] += samples_per_iter;
        if let Plan::Sparse { w, .. } = run.plan {
            run.store.prune_below(frontier.saturating_sub(3 * w));
        } else if matches!(run.plan, Plan::Moc) && frontier.is_multiple_of(1024) {
            let lo = frontier.saturating_sub(2 * cfg.model.experts_per_layer as u64 + 2);
            run.moc_log = run.moc_log.split_off(&lo);
            run.store.prune_below(lo);
        } else if let Some((&last, _)) = run.store.done.iter().next_back() {
            let keep: Vec<u64> = run.store.done.range(..last).rev().take(2).map(|(&s, _)| s).collect();
            if let Some(&lo) = keep.last() {
                run.store.prune_below(lo);
            }
        }
    }

    if run.checkpoints > 0 && run.store.done.is_empty() && events.is_empty() {
        log::warn!("no checkpoint finished replicating before the {horizon} s horizon");
    }
    let wall = clock.now;
    let goodput: Vec<GoodputBucket> = (0..buckets)
        .map(|i| {
            let start = i as f64 * cfg.goodput_bucket;
            let len = (horizon - start).min(cfg.goodput_bucket);
            let fraction = match run.plan {
                Plan::Moc => run.trajectory.iter().take_while(|x| x.0 <= start + len).last().map_or(0.0, |x| x.1),
                _ => 1.0,
            };
            GoodputBucket { start, samples_per_s: samples[i] / len, expert_fraction: fraction }
        })
        .collect();
    let iters = frontier.max(1) as f64;
    let overhead = (clock.stall + clock.idle) / iters;
    let (wsparse_or_interval, tokens_lost) = match (&run.plan, &run.policy) {
        (Plan::Sparse { w, .. }, _) => (*w, 0.0),
        (Plan::Dense { interval, .. }, _) => (*interval, 0.0),
        (Plan::Moc, PolicyState::Moc(m)) => (1, m.tokens_lost),
        _ => (1, 0.0),
    };
    Ok(Metrics {
        model: cfg.model.name.clone(),
        policy: cfg.policy.name().to_string(),
        ettr: if wall > 0.0 { clock.useful / wall } else { 0.0 },
        useful_iterations: frontier,
        wall,
        useful_time: clock.useful,
        stall_time: clock.stall,
        recovery_time: clock.recovery,
        idle_time: clock.idle,
        t_iter,
        wsparse_or_interval,
        overhead_s_per_iter: overhead,
        overhead_pct: 100.0 * overhead / t_iter,
        failures: events.len(),
        tokens_lost,
        checkpoints: run.checkpoints,
        goodput,
        recoveries: events,
        trajectory: run.trajectory,
    })
}

/// Handles the failure `trace.events[*next]` at `clock.now`, including any
/// failures that arrive before recovery completes.
#[allow(clippy::too_many_arguments)]
fn recover(
    run: &mut Run,
    clock: &mut Clock,
    trace: &FailureTrace,
    next: &mut usize,
    frontier: u64,
    wasted: f64,
    events: &mut Vec<RecoveryEvent>,
    tokens_per_iter: f64,
) -> Result<()> {
    let cfg = run.cfg;
    let horizon = cfg.horizon;
    let mut failed: BTreeSet<Worker> = BTreeSet::new();
    let mut wasted = wasted;
    let mut cascaded = false;
    loop {
        let ev = trace.events[*next];
        *next += 1;
        failed.extend(workers_on_node(ev.node, &cfg.cluster, &cfg.plan));
        run.store.cancel_after(clock.now);
        let target = run.restore_point(frontier);
        let mut tokens_lost = 0.0;
        if !cascaded {
            if matches!(run.plan, Plan::Moc) {
                tokens_lost = run.stale_tokens(target, tokens_per_iter);
            }
            if let PolicyState::Moc(m) = &mut run.policy {
                m.on_failure(target, tokens_lost);
            }
        }
        let (per_iter, share) = run.replay_iteration(&failed)?;
        let fixed = cfg.detection_delay + cfg.t_restart + run.load_time(share);
        let replay = (frontier - target) as f64 * per_iter;
        let total = fixed + replay;
        let end = clock.now + total;
        let tf = trace.events.get(*next).map_or(f64::INFINITY, |e| e.t);
        let cut = tf.min(horizon);
        events.push(RecoveryEvent {
            t: clock.now,
            node: ev.node,
            target,
            lost_iterations: frontier - target,
            wasted_seconds: wasted,
            fixed_seconds: fixed,
            replay_seconds: replay,
            tokens_lost,
            cascaded,
            interrupted: cut < end,
        });
        let v = run.trajectory_value();
        run.record(clock.now, v);
        if cut < end {
            clock.recovery += cut - clock.now;
            wasted = cut - clock.now;
            clock.now = cut;
            if tf < horizon {
                cascaded = true;
                continue;
            }
            return Ok(());
        }
        clock.recovery += total;
        clock.now = end;
        run.resnapshot(target, frontier, end);
        return Ok(());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NcclCoeff, PrecisionPlan};
    use crate::schedule::{generate_schedule, order_operators, MocState, OrderingScheme};
    use crate::sim::failures::FailureEvent;
    use crate::sim::failures::FailureKind;

    fn base(policy: PolicyState, failures: FailureProcess) -> SimConfig {
        let model = ModelSpec::uniform(6, 8, 2, 1_000_000).unwrap();
        let plan = ParallelPlan::layer_contiguous(&model, 3, 2, 1, 64, 8);
        let profile = ProfiledStats::new(&model, &PrecisionPlan::default(), vec![vec![0.1; 3]; 2], 0.05, 0.01);
        let cluster = ClusterSpec {
            nodes: 3,
            gpus_per_node: 2,
            pcie_bandwidth: 1e12,
            replication_bandwidth: 1e12,
            persist_bandwidth: 1e12,
            nccl: BTreeMap::from([(2, NcclCoeff { alpha: 0.0, beta: 0.0 })]),
            cpu_mem_per_node: 1 << 40,
        };
        SimConfig {
            model,
            cluster,
            plan,
            profile,
            policy,
            failures,
            horizon: 3600.0,
            t_restart: 0.0,
            detection_delay: 0.0,
            seed: 1,
            upstream_logging: false,
            goodput_bucket: 60.0,
            tokens_per_sample: 16,
            popularity: Vec::new(),
        }
    }

    fn sparse(model: &ModelSpec, o: u32) -> PolicyState {
        let ordered = order_operators(&model.operators, OrderingScheme::ById).unwrap();
        PolicyState::Sparse(generate_schedule(&ordered, o, OrderingScheme::ById, 0).unwrap())
    }

    fn no_failures() -> FailureProcess {
        FailureProcess::Trace(FailureTrace::default())
    }

    #[test]
    fn failure_free_cheap_policy_is_all_useful() {
        let cfg = base(PolicyState::GeminiOracle { interval: 10 }, no_failures());
        let m = run_simulation(&cfg).unwrap();
        assert_eq!(m.ettr, 1.0);
        assert!(m.accounting_gap().abs() < 1e-9);
        assert_eq!(m.wall, 3600.0);
        assert_eq!(m.failures, 0);
    }

    #[test]
    fn accounting_identity_under_failures() {
        for policy in [
            PolicyState::GeminiOracle { interval: 20 },
            PolicyState::CheckFreq { interval: 50, overhead_cap: 0.03 },
            PolicyState::Moc(MocState::new(6, 8, 1, 0.01)),
        ] {
            let mut cfg = base(policy, FailureProcess::Poisson { mtbf: 120.0 });
            cfg.cluster.pcie_bandwidth = 1e8;
            cfg.cluster.replication_bandwidth = 1e8;
            cfg.t_restart = 3.0;
            let m = run_simulation(&cfg).unwrap();
            assert!(m.failures > 10);
            assert!(m.accounting_gap().abs() < 1e-6, "{}", m.accounting_gap());
            assert!((0.0..=1.0).contains(&m.ettr));
        }
        let mut cfg = base(PolicyState::GeminiOracle { interval: 1 }, FailureProcess::Poisson { mtbf: 120.0 });
        cfg.policy = sparse(&cfg.model, 20);
        let m = run_simulation(&cfg).unwrap();
        assert!(m.accounting_gap().abs() < 1e-6);
    }

    #[test]
    fn sparse_recoveries_respect_bounds() {
        let mut cfg = base(PolicyState::GeminiOracle { interval: 1 }, FailureProcess::Poisson { mtbf: 60.0 });
        cfg.policy = sparse(&cfg.model, 20);
        cfg.horizon = 20_000.0;
        let m = run_simulation(&cfg).unwrap();
        let w = m.wsparse_or_interval as f64;
        assert_eq!(w, 3.0);
        let done: Vec<&RecoveryEvent> = m.recoveries.iter().filter(|e| !e.cascaded && !e.interrupted).collect();
        assert!(done.len() > 100);
        for e in &done {
            assert!(e.rollback_seconds() <= 2.0 * w * m.t_iter + 1e-9, "{e:?}");
            assert!(e.lost_iterations >= 3 && e.lost_iterations < 6);
        }
    }

    #[test]
    fn logging_never_slows_recovery() {
        let mut cfg = base(PolicyState::GeminiOracle { interval: 1 }, FailureProcess::Poisson { mtbf: 90.0 });
        cfg.policy = sparse(&cfg.model, 20);
        let off = run_simulation(&cfg).unwrap();
        cfg.upstream_logging = true;
        let on = run_simulation(&cfg).unwrap();
        assert_eq!(off.recoveries.len(), on.recoveries.len());
        let (a, b) = (&on.recoveries[0], &off.recoveries[0]);
        assert_eq!(a.lost_iterations, b.lost_iterations);
        assert!(a.fixed_seconds + a.replay_seconds < b.fixed_seconds + b.replay_seconds);
        for (a, b) in on.recoveries.iter().zip(&off.recoveries) {
            let per = |e: &RecoveryEvent| e.replay_seconds / e.lost_iterations.max(1) as f64;
            assert!(per(a) <= per(b) + 1e-9);
        }
        assert!(on.recovery_time < off.recovery_time);
    }

    #[test]
    fn dense_rollback_to_last_checkpoint() {
        let ev = |t| FailureEvent { t, node: 0, kind: FailureKind::Crash };
        let cfg = base(
            PolicyState::GeminiOracle { interval: 10 },
            FailureProcess::Trace(FailureTrace::new(vec![ev(100.0)], 3).unwrap()),
        );
        let m = run_simulation(&cfg).unwrap();
        let t_iter = m.t_iter;
        let frontier = (100.0 / t_iter) as u64;
        let e = &m.recoveries[0];
        assert_eq!(e.target, frontier / 10 * 10);
        assert!((e.replay_seconds - (frontier - e.target) as f64 * t_iter).abs() < 1e-9);
    }

    #[test]
    fn node_mapping_covers_all_workers() {
        let cfg = base(PolicyState::GeminiOracle { interval: 1 }, no_failures());
        let all: BTreeSet<Worker> =
            (0..cfg.cluster.nodes).flat_map(|n| workers_on_node(n, &cfg.cluster, &cfg.plan)).collect();
        assert_eq!(all.len(), 6);
        assert_eq!(workers_on_node(1, &cfg.cluster, &cfg.plan), vec![Worker { stage: 2, replica: 0 }, Worker { stage: 0, replica: 1 }]);
    }

    #[test]
    fn moc_escalates_and_loses_tokens() {
        let mut cfg = base(PolicyState::Moc(MocState::new(6, 8, 1, 0.0001)), FailureProcess::Poisson { mtbf: 300.0 });
        cfg.horizon = 7200.0;
        let m = run_simulation(&cfg).unwrap();
        assert!(m.tokens_lost > 0.0);
        assert_eq!(m.trajectory.last().unwrap().1, 1.0);
        assert!(m.trajectory.windows(2).all(|w| w[1].1 >= w[0].1));
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = base(PolicyState::GeminiOracle { interval: 5 }, FailureProcess::Poisson { mtbf: 100.0 });
        assert_eq!(run_simulation(&cfg).unwrap(), run_simulation(&cfg).unwrap());
    }
}
