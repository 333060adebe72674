//! TOML experiment configuration with dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{ClusterSpec, ModelShape, ModelSpec, ParallelPlan, PrecisionPlan, ProfiledStats};
use crate::sim::{FailureProcess, FailureTrace, PolicyKind, PolicyParams, Scenario};
use crate::train::data::stream;
use crate::verify::VerifyConfig;
use crate::exec::Execution;
use crate::workload::{alpha_for_skew, gen_routing_trace, sample_popularity, Drift, PopularityVector, RoutingTrace, TraceOptions};
use crate::{Error, Result};

const POPULARITY_TAG: u64 = 0x706f_7075;
const WORKLOAD_TAG: u64 = 0x776f_726b;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub pp: u32,
    pub dp: u32,
    #[serde(default = "one")]
    pub ep: u32,
    pub global_batch: u32,
    pub microbatch_size: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    /// Same per-micro-batch time on every stage of every pipeline.
    #[serde(default)]
    pub stage_time: Option<f64>,
    /// One row per data-parallel pipeline.
    #[serde(default)]
    pub stage_times: Option<Vec<Vec<f64>>>,
    pub t_sync: f64,
    pub t_update: f64,
    #[serde(default)]
    pub t_iter: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_policy")]
    pub policy: PolicyKind,
    #[serde(default = "default_mtbf")]
    pub mtbf: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_detection")]
    pub detection_delay: f64,
    #[serde(default = "default_restart")]
    pub t_restart: f64,
    #[serde(default = "yes")]
    pub upstream_logging: bool,
    #[serde(default = "default_bucket")]
    pub goodput_bucket: f64,
    #[serde(default = "default_tokens")]
    pub tokens_per_sample: u64,
    /// Failure trace CSV, relative to the config file.
    #[serde(default)]
    pub trace: Option<PathBuf>,
    /// Expert popularity skewness used for stale-expert token loss.
    #[serde(default)]
    pub skew: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            policy: default_policy(),
            mtbf: default_mtbf(),
            horizon: default_horizon(),
            detection_delay: default_detection(),
            t_restart: default_restart(),
            upstream_logging: true,
            goodput_bucket: default_bucket(),
            tokens_per_sample: default_tokens(),
            trace: None,
            skew: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_mtbfs")]
    pub mtbfs: Vec<f64>,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
    /// Fixed dense intervals for ETTR-vs-interval curves.
    #[serde(default)]
    pub intervals: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { mtbfs: default_mtbfs(), policies: default_policies(), intervals: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    #[serde(default)]
    pub skew: f64,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_tokens_per_iter")]
    pub tokens_per_iter: u64,
    /// Iterations per CSV bucket.
    #[serde(default = "default_workload_bucket")]
    pub bucket: u64,
    #[serde(default)]
    pub drift: Drift,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        WorkloadSection {
            skew: 0.0,
            iterations: default_iterations(),
            tokens_per_iter: default_tokens_per_iter(),
            bucket: default_workload_bucket(),
            drift: Drift::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub model: Option<ModelShape>,
    #[serde(default)]
    pub precision: PrecisionPlan,
    #[serde(default)]
    pub cluster: Option<ClusterSpec>,
    #[serde(default)]
    pub plan: Option<PlanSection>,
    #[serde(default)]
    pub profile: Option<ProfileSection>,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub policy: PolicyParams,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub workload: WorkloadSection,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
}

fn one() -> u32 {
    1
}
fn yes() -> bool {
    true
}
fn default_policy() -> PolicyKind {
    PolicyKind::Sparse
}
fn default_mtbf() -> f64 {
    600.0
}
fn default_horizon() -> f64 {
    12.0 * 3600.0
}
fn default_detection() -> f64 {
    5.0
}
fn default_restart() -> f64 {
    30.0
}
fn default_bucket() -> f64 {
    60.0
}
fn default_tokens() -> u64 {
    2048
}
fn default_mtbfs() -> Vec<f64> {
    vec![7200.0, 3600.0, 1800.0, 1200.0, 600.0]
}
fn default_policies() -> Vec<PolicyKind> {
    PolicyKind::ALL.to_vec()
}
fn default_iterations() -> u64 {
    100
}
fn default_tokens_per_iter() -> u64 {
    1 << 16
}
fn default_workload_bucket() -> u64 {
    10
}

/// A model, cluster and timing profile resolved from a config.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub model: ModelSpec,
    pub precision: PrecisionPlan,
    pub cluster: ClusterSpec,
    pub plan: ParallelPlan,
    pub profile: ProfiledStats,
}

impl Config {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let text = toml::to_string(&value).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: Config = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.precision.check().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file; a relative trace path resolves against the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(t) = &cfg.sim.trace {
            if t.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.sim.trace = Some(base.join(t));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let shape = self.model.as_ref().ok_or_else(|| missing("model"))?;
        let cluster = self.cluster.clone().ok_or_else(|| missing("cluster"))?;
        let p = self.plan.as_ref().ok_or_else(|| missing("plan"))?;
        let prof = self.profile.as_ref().ok_or_else(|| missing("profile"))?;
        let model = ModelSpec::from_shape(shape).map_err(|e| Error::Config(e.to_string()))?;
        if p.pp == 0 || p.dp == 0 || p.microbatch_size == 0 || p.global_batch % (p.dp * p.microbatch_size) != 0 {
            return Err(Error::Config(format!(
                "plan: global_batch {} must split evenly over dp {} and micro-batches of {}",
                p.global_batch, p.dp, p.microbatch_size
            )));
        }
        let plan = ParallelPlan::layer_contiguous(&model, p.pp, p.dp, p.ep, p.global_batch, p.microbatch_size);
        let stage_times = match (&prof.stage_times, prof.stage_time) {
            (Some(rows), None) => rows.clone(),
            (None, Some(t)) => vec![vec![t; p.pp as usize]; p.dp as usize],
            _ => return Err(Error::Config("profile: give exactly one of stage_time and stage_times".into())),
        };
        if stage_times.len() != p.dp as usize || stage_times.iter().any(|r| r.len() != p.pp as usize) {
            return Err(Error::Config(format!("profile.stage_times must be {} rows of {} stages", p.dp, p.pp)));
        }
        if stage_times.iter().flatten().any(|t| !(*t >= 0.0)) {
            return Err(Error::Config("profile.stage_times must be non-negative".into()));
        }
        let mut profile = ProfiledStats::new(&model, &self.precision, stage_times, prof.t_sync, prof.t_update);
        profile.t_iter_measured = prof.t_iter;
        let gpus_needed = p.pp * p.dp * p.ep;
        if gpus_needed > cluster.gpus() {
            return Err(Error::Config(format!("plan needs {gpus_needed} GPUs but the cluster has {}", cluster.gpus())));
        }
        Ok(Resolved { model, precision: self.precision, cluster, plan, profile })
    }

    /// Simulation inputs shared by every policy, with the popularity vector
    /// drawn from `seed`.
    pub fn scenario(&self, seed: u64) -> Result<Scenario> {
        let r = self.resolve()?;
        let s = &self.sim;
        let popularity = if s.skew > 0.0 {
            let c = alpha_for_skew(s.skew, r.model.experts_per_layer)?;
            sample_popularity(c, r.model.experts_per_layer, &mut stream(seed, &[POPULARITY_TAG]))?.p
        } else {
            Vec::new()
        };
        Ok(Scenario {
            model: r.model,
            cluster: r.cluster,
            plan: r.plan,
            profile: r.profile,
            params: self.policy.clone(),
            horizon: s.horizon,
            t_restart: s.t_restart,
            detection_delay: s.detection_delay,
            upstream_logging: s.upstream_logging,
            goodput_bucket: s.goodput_bucket,
            tokens_per_sample: s.tokens_per_sample,
            popularity,
            seed,
        })
    }

    /// Synthetic routing for the `[workload]` section with popularity drawn
    /// from `seed`.
    pub fn routing_trace(&self, seed: u64, exec: Execution) -> Result<(PopularityVector, RoutingTrace)> {
        let shape = self.model.as_ref().ok_or_else(|| missing("model"))?;
        let model = ModelSpec::from_shape(shape).map_err(|e| Error::Config(e.to_string()))?;
        let w = &self.workload;
        if w.bucket == 0 {
            return Err(Error::Config("workload.bucket must be at least 1".into()));
        }
        let e = model.experts_per_layer;
        let p = if w.skew > 0.0 {
            sample_popularity(alpha_for_skew(w.skew, e)?, e, &mut stream(seed, &[WORKLOAD_TAG]))?
        } else {
            PopularityVector::uniform(e)
        };
        let opts = TraceOptions { iterations: w.iterations, tokens_per_iter: w.tokens_per_iter, drift: w.drift, keep_tokens: false };
        let trace = gen_routing_trace(&model, &p, &opts, seed, exec)?;
        Ok((p, trace))
    }

    /// The configured failure process and the MTBF the oracle should assume.
    pub fn failure_process(&self, nodes: u32) -> Result<(FailureProcess, f64)> {
        match &self.sim.trace {
            Some(path) => {
                let f = std::fs::File::open(path)
                    .map_err(|e| Error::Config(format!("cannot open trace {}: {e}", path.display())))?;
                let trace = FailureTrace::read_csv(std::io::BufReader::new(f), nodes)?;
                let mtbf = trace.mean_gap().unwrap_or(self.sim.mtbf);
                Ok((FailureProcess::Trace(trace), mtbf))
            }
            None => Ok((FailureProcess::Poisson { mtbf: self.sim.mtbf }, self.sim.mtbf)),
        }
    }
}

fn missing(section: &str) -> Error {
    Error::Config(format!("missing [{section}] section"))
}

/// Sets `a.b.c=value` in a TOML table. The value is parsed as TOML and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let value = parse_value(raw.trim());
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[model]
name = "small"
layers = 4
experts_per_layer = 8
top_k = 2
hidden = 64
expert_ffn = 128

[cluster]
nodes = 2
gpus_per_node = 4
pcie_bandwidth = 1e9
replication_bandwidth = 1e9
cpu_mem_per_node = 1000000000000

[cluster.nccl.4]
alpha = 1e-4
beta = 1e-9

[plan]
pp = 2
dp = 2
ep = 2
global_batch = 64
microbatch_size = 8

[profile]
stage_time = 0.01
t_sync = 0.005
t_update = 0.002
"#;

    #[test]
    fn parses_and_resolves() {
        let c = Config::from_toml_str(SMALL, &[]).unwrap();
        let r = c.resolve().unwrap();
        assert_eq!(r.plan.microbatches, 4);
        assert_eq!(r.cluster.nccl[&4].alpha, 1e-4);
        assert!((r.profile.t_iter(&r.plan) - (5.0 * 0.01 + 0.007)).abs() < 1e-12);
        assert_eq!(c.sim.detection_delay, 5.0);
        assert_eq!(c.sim.t_restart, 30.0);
    }

    #[test]
    fn overrides_apply_before_typing() {
        let o = ["sim.mtbf=1200".to_string(), "sim.policy=gemini".into(), "policy.gemini_interval=7".into()];
        let c = Config::from_toml_str(SMALL, &o).unwrap();
        assert_eq!(c.sim.mtbf, 1200.0);
        assert_eq!(c.sim.policy, PolicyKind::Gemini);
        assert_eq!(c.policy.gemini_interval, Some(7));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_toml_str(SMALL, &["sim.mtbff=3".into()]).is_err());
        assert!(Config::from_toml_str(&format!("{SMALL}\n[extra]\nx = 1\n"), &[]).is_err());
        assert!(Config::from_toml_str(SMALL, &["nonsense".into()]).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = Config::from_toml_str(SMALL, &["sim.skew=0.5".into()]).unwrap();
        let again = Config::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn missing_sections_are_config_errors() {
        let c = Config::from_toml_str("[sim]\nmtbf = 60\n", &[]).unwrap();
        assert!(matches!(c.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn skewed_popularity_is_seeded() {
        let c = Config::from_toml_str(SMALL, &["sim.skew=0.5".into()]).unwrap();
        let a = c.scenario(1).unwrap().popularity;
        assert_eq!(a.len(), 8);
        assert_eq!(a, c.scenario(1).unwrap().popularity);
        assert_ne!(a, c.scenario(2).unwrap().popularity);
    }
}
