use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dirichlet::{sample_popularity, PopularityVector};
use super::skew::Concentration;
use crate::exec::Execution;
use crate::model::ModelSpec;
use crate::schedule::observe_batch;
use crate::train::data::stream;
use crate::{Error, Result};

const ROUTE_TAG: u64 = 0x726f_7574;
const DRIFT_TAG: u64 = 0x6472_6966;

/// How expert popularity changes over a trace.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Drift {
    #[default]
    None,
    /// A fresh draw replaces the popularity every `every` iterations.
    Resample { every: u64, concentration: Concentration },
    /// Popularity moves linearly between fresh draws spaced `every` apart.
    Interpolate { every: u64, concentration: Concentration },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceOptions {
    pub iterations: u64,
    pub tokens_per_iter: u64,
    #[serde(default)]
    pub drift: Drift,
    /// Keep every token's selection, not only the counts.
    #[serde(default)]
    pub keep_tokens: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutedToken {
    pub experts: Vec<u32>,
    /// Popularity of the selected experts renormalized over the selection.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRouting {
    pub iteration: u64,
    /// Popularity in force for this iteration.
    pub popularity: Vec<f64>,
    /// Tokens per expert, indexed `[layer][expert]`.
    pub counts: Vec<Vec<u64>>,
    /// Summed gating weights per expert, indexed `[layer][expert]`.
    pub prob_sums: Vec<Vec<f64>>,
    /// Per layer, per token selections when requested.
    pub tokens: Option<Vec<Vec<RoutedToken>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub layers: u32,
    pub experts: u32,
    pub top_k: u32,
    pub tokens_per_iter: u64,
    pub iterations: Vec<IterationRouting>,
}

impl RoutingTrace {
    /// Tokens per expert summed over the trace, indexed `[layer][expert]`.
    pub fn totals(&self) -> Vec<Vec<u64>> {
        let mut t = vec![vec![0u64; self.experts as usize]; self.layers as usize];
        for it in &self.iterations {
            for (acc, row) in t.iter_mut().zip(&it.counts) {
                acc.iter_mut().zip(row).for_each(|(a, c)| *a += c);
            }
        }
        t
    }

    /// Folds every iteration into the model's expert popularity counters,
    /// one batch per iteration.
    pub fn feed(&self, model: &mut ModelSpec, decay: f64) -> Result<()> {
        if model.layers != self.layers || model.experts_per_layer != self.experts {
            return Err(Error::invalid("routing trace does not match the model's experts"));
        }
        for it in &self.iterations {
            let counts: Vec<u64> = it.counts.concat();
            let probs: Vec<f64> = it.prob_sums.concat();
            observe_batch(&mut model.operators, &counts, &probs, decay);
        }
        Ok(())
    }

    /// Per-expert token shares of one iteration, averaged over layers.
    pub fn shares(&self, iteration: usize) -> Vec<f64> {
        let it = &self.iterations[iteration];
        let per_layer = (self.top_k as u64 * self.tokens_per_iter) as f64;
        let mut s = vec![0.0; self.experts as usize];
        for row in &it.counts {
            s.iter_mut().zip(row).for_each(|(a, c)| *a += *c as f64 / per_layer);
        }
        s.iter_mut().for_each(|a| *a /= self.layers as f64);
        s
    }
}

/// Draws `k` distinct experts: each pick is proportional to popularity
/// among those not yet picked. Once the remaining mass is zero, picks are
/// uniform over the rest.
fn pick_without_replacement<R: Rng + ?Sized>(p: &[f64], k: usize, picked: &mut [bool], out: &mut Vec<u32>, rng: &mut R) {
    picked.iter_mut().for_each(|b| *b = false);
    out.clear();
    let mut mass: f64 = p.iter().sum();
    for n in 0..k {
        let mut choice = None;
        if mass > 0.0 {
            let mut u = rng.random::<f64>() * mass;
            let mut last = None;
            for (i, &w) in p.iter().enumerate() {
                if picked[i] || w <= 0.0 {
                    continue;
                }
                last = Some(i);
                if u < w {
                    choice = Some(i);
                    break;
                }
                u -= w;
            }
            choice = choice.or(last);
        }
        let i = match choice {
            Some(i) => i,
            None => {
                let r = rng.random_range(0..p.len() - n);
                (0..p.len()).filter(|&i| !picked[i]).nth(r).unwrap_or(0)
            }
        };
        picked[i] = true;
        mass = (mass - p[i]).max(0.0);
        out.push(i as u32);
    }
}

fn popularity_at(base: &PopularityVector, drift: Drift, seed: u64, t: u64) -> Result<Vec<f64>> {
    let draw = |epoch: u64, c: Concentration| -> Result<Vec<f64>> {
        if epoch == 0 {
            return Ok(base.p.clone());
        }
        Ok(sample_popularity(c, base.experts(), &mut stream(seed, &[DRIFT_TAG, epoch]))?.p)
    };
    match drift {
        Drift::None => Ok(base.p.clone()),
        Drift::Resample { every, concentration } => draw(t / every.max(1), concentration),
        Drift::Interpolate { every, concentration } => {
            let every = every.max(1);
            let (e, f) = (t / every, (t % every) as f64 / every as f64);
            let (a, b) = (draw(e, concentration)?, draw(e + 1, concentration)?);
            Ok(a.iter().zip(&b).map(|(x, y)| (1.0 - f) * x + f * y).collect())
        }
    }
}

/// Synthetic routing: every layer routes each token independently to
/// `top_k` experts drawn from the same popularity. Iteration `t` uses its
/// own stream derived from `(seed, t)`, so the result does not depend on
/// `exec`.
pub fn gen_routing_trace(
    model: &ModelSpec,
    p: &PopularityVector,
    opts: &TraceOptions,
    seed: u64,
    exec: Execution,
) -> Result<RoutingTrace> {
    let (layers, experts, k) = (model.layers, model.experts_per_layer, model.top_k);
    if k == 0 || k > experts {
        return Err(Error::TopKExceedsExperts { top_k: k, experts });
    }
    if p.experts() != experts {
        return Err(Error::invalid(format!("popularity covers {} experts, model has {experts}", p.experts())));
    }
    if opts.tokens_per_iter == 0 {
        return Err(Error::invalid("tokens_per_iter must be at least 1"));
    }
    let iterations = exec.map_range(opts.iterations as usize, |t| -> Result<IterationRouting> {
        let t = t as u64;
        let pop = popularity_at(p, opts.drift, seed, t)?;
        let mut counts = vec![vec![0u64; experts as usize]; layers as usize];
        let mut prob_sums = vec![vec![0.0f64; experts as usize]; layers as usize];
        let mut tokens = opts.keep_tokens.then(Vec::new);
        let mut picked = vec![false; experts as usize];
        let mut sel = Vec::with_capacity(k as usize);
        for l in 0..layers as usize {
            let mut rng = stream(seed, &[ROUTE_TAG, t, l as u64]);
            let mut layer_tokens = Vec::new();
            for _ in 0..opts.tokens_per_iter {
                pick_without_replacement(&pop, k as usize, &mut picked, &mut sel, &mut rng);
                let z: f64 = sel.iter().map(|&j| pop[j as usize]).sum();
                let weights: Vec<f64> = sel
                    .iter()
                    .map(|&j| if z > 0.0 { pop[j as usize] / z } else { 1.0 / k as f64 })
                    .collect();
                for (&j, w) in sel.iter().zip(&weights) {
                    counts[l][j as usize] += 1;
                    prob_sums[l][j as usize] += w;
                }
                if tokens.is_some() {
                    layer_tokens.push(RoutedToken { experts: sel.clone(), weights });
                }
            }
            if let Some(tk) = tokens.as_mut() {
                tk.push(layer_tokens);
            }
        }
        Ok(IterationRouting { iteration: t, popularity: pop, counts, prob_sums, tokens })
    });
    Ok(RoutingTrace {
        layers,
        experts,
        top_k: k,
        tokens_per_iter: opts.tokens_per_iter,
        iterations: iterations.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveStats {
    pub experts: u32,
    /// Experts with at least one token, indexed `[iteration][layer]`.
    pub active: Vec<Vec<u32>>,
    /// Token shares over the whole trace, indexed `[layer][expert]`.
    pub shares: Vec<Vec<f64>>,
}

impl ActiveStats {
    fn flat(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.active.iter().flatten().copied().collect();
        v.sort_unstable();
        v
    }

    /// Lower median of active-expert counts over (iteration, layer) pairs.
    pub fn median_active(&self) -> u32 {
        let v = self.flat();
        v[(v.len() - 1) / 2]
    }

    /// Share of (iteration, layer) pairs with at least `n` active experts.
    pub fn fraction_at_least(&self, n: u32) -> f64 {
        let v = self.flat();
        v.iter().filter(|&&a| a >= n).count() as f64 / v.len() as f64
    }

    /// Empirical CDF as `(active experts, P[X <= active])` for 0..=E.
    pub fn cdf(&self) -> Vec<(u32, f64)> {
        let v = self.flat();
        (0..=self.experts)
            .map(|a| (a, v.partition_point(|&x| x <= a) as f64 / v.len() as f64))
            .collect()
    }
}

pub fn active_expert_stats(trace: &RoutingTrace) -> Result<ActiveStats> {
    if trace.iterations.is_empty() {
        return Err(Error::invalid("routing trace is empty"));
    }
    let active = trace
        .iterations
        .iter()
        .map(|it| it.counts.iter().map(|row| row.iter().filter(|&&c| c > 0).count() as u32).collect())
        .collect();
    let totals = trace.totals();
    let shares = totals
        .iter()
        .map(|row| {
            let s: u64 = row.iter().sum();
            row.iter().map(|&c| c as f64 / s as f64).collect()
        })
        .collect();
    Ok(ActiveStats { experts: trace.experts, active, shares })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::detect_drift;
    use crate::workload::alpha_for_skew;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn opts(iterations: u64, tokens: u64) -> TraceOptions {
        TraceOptions { iterations, tokens_per_iter: tokens, drift: Drift::None, keep_tokens: false }
    }

    #[test]
    fn top_k_equal_to_experts_hits_everyone() {
        let m = ModelSpec::uniform(2, 6, 6, 1).unwrap();
        let mut o = opts(3, 10);
        o.keep_tokens = true;
        let t = gen_routing_trace(&m, &PopularityVector::from_weights(&[9., 1., 1., 1., 1., 0.]).unwrap(), &o, 1, Execution::Sequential).unwrap();
        for it in &t.iterations {
            assert!(it.counts.iter().all(|row| row.iter().all(|&c| c == 10)));
            for tok in it.tokens.as_ref().unwrap().iter().flatten() {
                let mut e = tok.experts.clone();
                e.sort();
                assert_eq!(e, (0..6).collect::<Vec<_>>());
            }
        }
        assert_eq!(active_expert_stats(&t).unwrap().median_active(), 6);
    }

    #[test]
    fn too_many_picks_rejected() {
        let mut m = ModelSpec::uniform(1, 4, 2, 1).unwrap();
        m.top_k = 5;
        let r = gen_routing_trace(&m, &PopularityVector::uniform(4), &opts(1, 1), 0, Execution::Sequential);
        assert!(matches!(r, Err(Error::TopKExceedsExperts { .. })));
    }

    #[test]
    fn execution_mode_is_invisible() {
        let m = ModelSpec::uniform(2, 8, 2, 1).unwrap();
        let p = sample_popularity(Concentration::Alpha(0.5), 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let a = gen_routing_trace(&m, &p, &opts(5, 100), 9, Execution::Sequential).unwrap();
        let b = gen_routing_trace(&m, &p, &opts(5, 100), 9, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn popularity_counters_equal_trace_counts() {
        let mut m = ModelSpec::uniform(2, 4, 2, 1).unwrap();
        let t = gen_routing_trace(&m, &PopularityVector::uniform(4), &opts(4, 50), 2, Execution::Sequential).unwrap();
        t.feed(&mut m, 0.9).unwrap();
        let totals = t.totals();
        for l in 0..2 {
            for e in 0..4 {
                assert_eq!(m.op(m.expert_op(l, e)).unwrap().popularity.hard, totals[l as usize][e as usize]);
            }
        }
    }

    #[test]
    fn resampled_drift_is_detected() {
        let m = ModelSpec::uniform(1, 16, 2, 1).unwrap();
        let c = alpha_for_skew(0.25, 16).unwrap();
        let p = sample_popularity(c, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let d = 5;
        let mut o = opts(3 * d, 2000);
        o.drift = Drift::Resample { every: d, concentration: c };
        let t = gen_routing_trace(&m, &p, &o, 3, Execution::Sequential).unwrap();
        let fired = (1..t.iterations.len()).filter(|&i| detect_drift(&t.shares(i - 1), &t.shares(i))).count();
        assert!(fired >= 1);
    }

    #[test]
    fn interpolation_starts_at_base() {
        let m = ModelSpec::uniform(1, 4, 1, 1).unwrap();
        let p = PopularityVector::from_weights(&[4., 3., 2., 1.]).unwrap();
        let mut o = opts(2, 1);
        o.drift = Drift::Interpolate { every: 4, concentration: Concentration::Alpha(1.0) };
        let t = gen_routing_trace(&m, &p, &o, 0, Execution::Sequential).unwrap();
        assert_eq!(t.iterations[0].popularity, p.p);
        assert_ne!(t.iterations[1].popularity, p.p);
        assert!((t.iterations[1].popularity.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cdf_ends_at_one() {
        let m = ModelSpec::uniform(1, 8, 2, 1).unwrap();
        let t = gen_routing_trace(&m, &PopularityVector::uniform(8), &opts(3, 4), 0, Execution::Sequential).unwrap();
        let s = active_expert_stats(&t).unwrap();
        assert_eq!(s.cdf().last().unwrap().1, 1.0);
        assert!(s.median_active() <= 8);
        assert!(active_expert_stats(&RoutingTrace { iterations: vec![], ..t }).is_err());
    }

    proptest! {
        #[test]
        fn tokens_are_conserved(seed in 0u64..1000, e in 2u32..12, k in 1u32..4, tokens in 1u64..64, alpha in 0.01f64..5.0) {
            let k = k.min(e);
            let m = ModelSpec::uniform(2, e, k, 1).unwrap();
            let p = sample_popularity(Concentration::Alpha(alpha), e, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut o = opts(2, tokens);
            o.keep_tokens = true;
            let t = gen_routing_trace(&m, &p, &o, seed, Execution::Sequential).unwrap();
            for it in &t.iterations {
                for row in &it.counts {
                    prop_assert_eq!(row.iter().sum::<u64>(), k as u64 * tokens);
                }
                for tok in it.tokens.as_ref().unwrap().iter().flatten() {
                    let mut x = tok.experts.clone();
                    x.sort();
                    x.dedup();
                    prop_assert_eq!(x.len(), k as usize);
                    prop_assert!((tok.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
