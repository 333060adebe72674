use crate::model::{ClusterSpec, ParallelPlan, ProfiledStats};
use crate::{Error, Result};

/// Affine collective cost `alpha(p) + beta(p) * bytes`.
pub fn nccl_time(bytes: f64, group_size: u32, cluster: &ClusterSpec) -> Result<f64> {
    let c = cluster.nccl.get(&group_size).ok_or(Error::UnknownGroupSize(group_size))?;
    Ok(c.alpha + c.beta * bytes)
}

/// One pipeline's fill-and-drain time, `(M + S - 1) * max_s t_s`.
pub fn pipeline_time(stage_times: &[f64], microbatches: u32) -> f64 {
    let s = stage_times.len() as f64;
    let max = stage_times.iter().copied().fold(0.0, f64::max);
    (microbatches as f64 + s - 1.0) * max
}

/// Slowest data-parallel pipeline plus gradient sync and optimizer update.
pub fn iteration_time(profile: &ProfiledStats, plan: &ParallelPlan) -> f64 {
    let slowest = profile
        .stage_times
        .iter()
        .map(|p| pipeline_time(p, plan.microbatches))
        .fold(0.0, f64::max);
    slowest + profile.t_sync + profile.t_update
}

/// Replaying one iteration on a single stage with its neighbours' logs:
/// `M` micro-batches at that stage's pace, no pipeline fill.
pub fn localized_iteration_time(stage_times: &[f64], microbatches: u32, t_update: f64) -> f64 {
    let max = stage_times.iter().copied().fold(0.0, f64::max);
    microbatches as f64 * max + t_update
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, NcclCoeff, PrecisionPlan};
    use std::collections::BTreeMap;

    fn profile(pipes: Vec<Vec<f64>>, sync: f64, update: f64) -> (ProfiledStats, ParallelPlan) {
        let m = ModelSpec::uniform(4, 2, 1, 1).unwrap();
        let plan = ParallelPlan::layer_contiguous(&m, pipes[0].len() as u32, pipes.len() as u32, 1, 8 * pipes.len() as u32, 1);
        (ProfiledStats::new(&m, &PrecisionPlan::default(), pipes, sync, update), plan)
    }

    #[test]
    fn affine_collectives() {
        let c = ClusterSpec {
            nodes: 1,
            gpus_per_node: 8,
            pcie_bandwidth: 1.0,
            replication_bandwidth: 1.0,
            persist_bandwidth: 1.0,
            nccl: BTreeMap::from([(8, NcclCoeff { alpha: 1e-4, beta: 1e-8 })]),
            cpu_mem_per_node: 1,
        };
        assert!((nccl_time(1e6, 8, &c).unwrap() - 0.0101).abs() < 1e-15);
        assert_eq!(nccl_time(0.0, 8, &c).unwrap(), 1e-4);
        let base = nccl_time(0.0, 8, &c).unwrap();
        let one = nccl_time(5e5, 8, &c).unwrap() - base;
        let two = nccl_time(1e6, 8, &c).unwrap() - base;
        assert!((two - 2.0 * one).abs() < 1e-15);
        assert!(matches!(nccl_time(1.0, 4, &c), Err(Error::UnknownGroupSize(4))));
    }

    #[test]
    fn pipeline_iteration() {
        let (p, plan) = profile(vec![vec![0.010; 4]], 0.005, 0.002);
        assert!((iteration_time(&p, &plan) - 0.117).abs() < 1e-12);
        assert!((p.t_iter(&plan) - 0.117).abs() < 1e-12);
    }

    #[test]
    fn single_stage_single_microbatch() {
        assert_eq!(pipeline_time(&[0.3], 1), 0.3);
    }

    #[test]
    fn slower_pipeline_dominates() {
        let (p, plan) = profile(vec![vec![0.010, 0.010], vec![0.012, 0.008]], 0.0, 0.0);
        assert!((iteration_time(&p, &plan) - 9.0 * 0.012).abs() < 1e-12);
    }
}
