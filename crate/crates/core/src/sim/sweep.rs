use serde::{Deserialize, Serialize};

use super::engine::{run_simulation, Metrics, SimConfig};
use super::failures::FailureProcess;
use super::policy::{build_policy, CostModel, PolicyKind, PolicyParams};
use crate::exec::Execution;
use crate::model::{ClusterSpec, ModelSpec, ParallelPlan, ProfiledStats};
use crate::schedule::PolicyState;
use crate::Result;

/// Everything a simulation needs apart from the policy and failure process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub model: ModelSpec,
    pub cluster: ClusterSpec,
    pub plan: ParallelPlan,
    pub profile: ProfiledStats,
    pub params: PolicyParams,
    pub horizon: f64,
    pub t_restart: f64,
    pub detection_delay: f64,
    pub upstream_logging: bool,
    pub goodput_bucket: f64,
    pub tokens_per_sample: u64,
    pub popularity: Vec<f64>,
    pub seed: u64,
}

impl Scenario {
    pub fn costs(&self) -> Result<CostModel> {
        CostModel::new(&self.cluster, &self.plan, &self.profile)
    }

    /// `mtbf` feeds the oracle interval; for traces pass the trace MTBF.
    pub fn sim_config(&self, kind: PolicyKind, failures: FailureProcess, mtbf: f64) -> Result<SimConfig> {
        let costs = self.costs()?;
        let policy = build_policy(kind, &self.params, &self.model, &self.profile, &costs, mtbf)?;
        Ok(self.with_policy(policy, failures))
    }

    pub fn with_policy(&self, policy: PolicyState, failures: FailureProcess) -> SimConfig {
        SimConfig {
            model: self.model.clone(),
            cluster: self.cluster.clone(),
            plan: self.plan.clone(),
            profile: self.profile.clone(),
            policy,
            failures,
            horizon: self.horizon,
            t_restart: self.t_restart,
            detection_delay: self.detection_delay,
            seed: self.seed,
            upstream_logging: self.upstream_logging,
            goodput_bucket: self.goodput_bucket,
            tokens_per_sample: self.tokens_per_sample,
            popularity: self.popularity.clone(),
        }
    }
}

/// One sweep cell; a failed run keeps its error text.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub model: String,
    pub policy: PolicyKind,
    pub mtbf: f64,
    pub result: std::result::Result<Metrics, String>,
}

/// Runs every scenario under every MTBF and policy. All policies of one
/// scenario and MTBF see the same failure events. Rows come back ordered by
/// scenario, then MTBF, then policy.
pub fn sweep(scenarios: &[Scenario], mtbfs: &[f64], policies: &[PolicyKind], exec: Execution) -> Vec<SweepRow> {
    let jobs: Vec<(usize, f64, PolicyKind)> = (0..scenarios.len())
        .flat_map(|s| mtbfs.iter().flat_map(move |&m| policies.iter().map(move |&p| (s, m, p))))
        .collect();
    exec.map(&jobs, |&(s, mtbf, kind)| {
        let sc = &scenarios[s];
        let result = sc
            .sim_config(kind, FailureProcess::Poisson { mtbf }, mtbf)
            .and_then(|cfg| run_simulation(&cfg))
            .map_err(|e| e.to_string());
        SweepRow { model: sc.model.name.clone(), policy: kind, mtbf, result }
    })
}

/// Dense in-memory checkpointing at each fixed interval, same failures for
/// every interval.
pub fn interval_sweep(
    scenario: &Scenario,
    mtbf: f64,
    intervals: &[u64],
    exec: Execution,
) -> Vec<(u64, std::result::Result<Metrics, String>)> {
    exec.map(intervals, |&interval| {
        let cfg = scenario.with_policy(PolicyState::GeminiOracle { interval }, FailureProcess::Poisson { mtbf });
        (interval, run_simulation(&cfg).map_err(|e| e.to_string()))
    })
}
