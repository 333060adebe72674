use serde::{Deserialize, Serialize};

use crate::model::{ClusterSpec, ModelSpec, ParallelPlan, ProfiledStats};
use crate::schedule::{
    checkfreq_interval, oracle_interval, order_operators, plan_window, MocState, OrderingScheme, PolicyState,
    WindowBudget,
};
use crate::{Error, Result};

/// Bandwidths and sizes shared by every policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub t_iter: f64,
    /// Device-to-host snapshot bandwidth over all GPUs, bytes/s.
    pub snapshot_bandwidth: f64,
    /// Host-to-peer replication bandwidth over all nodes, bytes/s.
    pub replication_bandwidth: f64,
    /// Bandwidth to durable storage, bytes/s.
    pub persist_bandwidth: f64,
    pub dense_bytes: u64,
}

impl CostModel {
    pub fn new(cluster: &ClusterSpec, plan: &ParallelPlan, profile: &ProfiledStats) -> Result<Self> {
        let c = CostModel {
            t_iter: profile.t_iter(plan),
            snapshot_bandwidth: cluster.aggregate_pcie(),
            replication_bandwidth: cluster.aggregate_replication(),
            persist_bandwidth: cluster.persist_bandwidth,
            dense_bytes: profile.dense_bytes(),
        };
        for (name, v) in [
            ("t_iter", c.t_iter),
            ("cluster.pcie_bandwidth", c.snapshot_bandwidth),
            ("cluster.replication_bandwidth", c.replication_bandwidth),
            ("cluster.persist_bandwidth", c.persist_bandwidth),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(c)
    }

    pub fn copy_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.snapshot_bandwidth
    }

    /// Time a snapshot of `bytes` adds to its iteration.
    pub fn stall(&self, bytes: u64) -> f64 {
        (self.copy_time(bytes) - self.t_iter).max(0.0)
    }

    pub fn window_budget(&self) -> WindowBudget {
        WindowBudget { t_iter: self.t_iter, bandwidth: self.snapshot_bandwidth }
    }

    /// Time to write a dense checkpoint to durable storage.
    pub fn persist_time(&self) -> f64 {
        self.dense_bytes as f64 / self.persist_bandwidth
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Sparse,
    Checkfreq,
    Gemini,
    Moc,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [PolicyKind::Sparse, PolicyKind::Gemini, PolicyKind::Checkfreq, PolicyKind::Moc];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Sparse => "sparse",
            PolicyKind::Checkfreq => "checkfreq",
            PolicyKind::Gemini => "gemini",
            PolicyKind::Moc => "moc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "sparse" => PolicyKind::Sparse,
            "checkfreq" => PolicyKind::Checkfreq,
            "gemini" => PolicyKind::Gemini,
            "moc" => PolicyKind::Moc,
            other => return Err(Error::Config(format!("unknown policy `{other}` (sparse, checkfreq, gemini, moc)"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    #[serde(default = "default_ordering")]
    pub ordering: OrderingScheme,
    /// Lets a window slot hold a single active operator.
    #[serde(default)]
    pub allow_single: bool,
    #[serde(default = "default_cap")]
    pub checkfreq_cap: f64,
    /// Share of experts per layer in the first partial-expert snapshot.
    #[serde(default = "default_moc_fraction")]
    pub moc_initial_fraction: f64,
    /// Tolerated lost tokens as a fraction of tokens processed.
    #[serde(default = "default_moc_budget")]
    pub moc_budget_fraction: f64,
    #[serde(default = "default_max_interval")]
    pub max_interval: u64,
    /// Fixed in-memory checkpoint interval instead of the oracle choice.
    #[serde(default)]
    pub gemini_interval: Option<u64>,
}

fn default_ordering() -> OrderingScheme {
    OrderingScheme::HardCount
}
fn default_cap() -> f64 {
    0.03
}
fn default_moc_fraction() -> f64 {
    0.125
}
fn default_moc_budget() -> f64 {
    0.01
}
fn default_max_interval() -> u64 {
    10_000
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            ordering: default_ordering(),
            allow_single: false,
            checkfreq_cap: default_cap(),
            moc_initial_fraction: default_moc_fraction(),
            moc_budget_fraction: default_moc_budget(),
            max_interval: default_max_interval(),
            gemini_interval: None,
        }
    }
}

/// Initial policy state. `mtbf` feeds the oracle interval search.
pub fn build_policy(
    kind: PolicyKind,
    params: &PolicyParams,
    model: &ModelSpec,
    profile: &ProfiledStats,
    costs: &CostModel,
    mtbf: f64,
) -> Result<PolicyState> {
    Ok(match kind {
        PolicyKind::Sparse => {
            let ordered = order_operators(&model.operators, params.ordering)?;
            let (schedule, _) = plan_window(
                &ordered,
                &profile.operator_bytes,
                costs.window_budget(),
                params.ordering,
                params.allow_single,
                0,
            )?;
            PolicyState::Sparse(schedule)
        }
        PolicyKind::Checkfreq => PolicyState::CheckFreq {
            interval: checkfreq_interval(costs.persist_time(), costs.t_iter, params.checkfreq_cap)?,
            overhead_cap: params.checkfreq_cap,
        },
        PolicyKind::Gemini => {
            let interval = match params.gemini_interval {
                Some(i) if i >= 1 => i,
                Some(_) => return Err(Error::Config("policy.gemini_interval must be at least 1".into())),
                None => {
                    if !(mtbf > 0.0) {
                        return Err(Error::Config(format!("oracle interval needs a positive MTBF, got {mtbf}")));
                    }
                    oracle_interval(costs.stall(costs.dense_bytes), costs.t_iter, mtbf, params.max_interval)
                }
            };
            PolicyState::GeminiOracle { interval }
        }
        PolicyKind::Moc => {
            if !(params.moc_initial_fraction > 0.0 && params.moc_initial_fraction <= 1.0) {
                return Err(Error::Config("policy.moc_initial_fraction must lie in (0, 1]".into()));
            }
            let e = model.experts_per_layer;
            let k = ((params.moc_initial_fraction * e as f64).round() as u32).clamp(1, e);
            PolicyState::Moc(MocState::new(model.layers, e, k, params.moc_budget_fraction))
        }
    })
}
