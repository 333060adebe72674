//! Partial-expert checkpointing baseline: a round-robin subset of experts
//! per iteration, widened whenever lost tokens outrun the budget.

use serde::{Deserialize, Serialize};

use crate::model::{ModelSpec, OperatorId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MocState {
    pub layers: u32,
    pub experts: u32,
    /// Experts per layer snapshotted each iteration.
    pub k: u32,
    pub cursor: u32,
    /// Tolerated lost tokens as a fraction of tokens processed.
    pub budget_fraction: f64,
    pub tokens_lost: f64,
    pub tokens_processed: f64,
    /// Iteration of each expert index's latest snapshot (shared by all layers).
    pub last_snapshot: Vec<u64>,
    /// `(iteration, k)` after every change of `k`.
    pub k_history: Vec<(u64, u32)>,
}

impl MocState {
    pub fn new(layers: u32, experts: u32, k: u32, budget_fraction: f64) -> Self {
        let k = k.clamp(1, experts.max(1));
        MocState {
            layers,
            experts,
            k,
            cursor: 0,
            budget_fraction,
            tokens_lost: 0.0,
            tokens_processed: 0.0,
            last_snapshot: vec![0; experts as usize],
            k_history: vec![(0, k)],
        }
    }

    /// Expert indices chosen for the next snapshot, advancing the cursor.
    pub fn step(&mut self, iteration: u64) -> Vec<u32> {
        let picked: Vec<u32> = (0..self.k).map(|i| (self.cursor + i) % self.experts).collect();
        self.cursor = (self.cursor + self.k) % self.experts;
        for &e in &picked {
            self.last_snapshot[e as usize] = iteration;
        }
        picked
    }

    /// Operators for this iteration's snapshot: the chosen experts of every
    /// layer plus all non-expert and gate operators.
    pub fn step_operators(&mut self, model: &ModelSpec, iteration: u64) -> Vec<OperatorId> {
        let picked = self.step(iteration);
        let mut out = Vec::new();
        for l in 0..model.layers {
            out.extend(picked.iter().map(|&e| model.expert_op(l, e)));
            out.push(model.non_expert_op(l));
            out.push(model.gate_op(l));
        }
        out
    }

    pub fn fraction(&self) -> f64 {
        self.k as f64 / self.experts as f64
    }

    pub fn add_processed(&mut self, tokens: f64) {
        self.tokens_processed += tokens;
    }

    /// Tokens whose effect on stale experts is discarded when rolling back
    /// at `iteration`: each expert loses its share `p[j]` of every
    /// iteration since its latest snapshot.
    pub fn stale_token_loss(&self, iteration: u64, tokens_per_iter: f64, p: &[f64]) -> f64 {
        self.last_snapshot
            .iter()
            .zip(p)
            .map(|(&last, &share)| iteration.saturating_sub(last) as f64 * tokens_per_iter * share)
            .sum()
    }

    /// Accounts one failure's loss and doubles `k` (up to all experts) when
    /// the cumulative loss exceeds the budget for tokens processed so far.
    pub fn on_failure(&mut self, iteration: u64, lost: f64) {
        self.tokens_lost += lost;
        if self.tokens_lost > self.budget_fraction * self.tokens_processed && self.k < self.experts {
            self.k = (self.k * 2).min(self.experts);
            self.k_history.push((iteration, self.k));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_chunks() {
        let mut s = MocState::new(1, 64, 8, 0.01);
        assert_eq!(s.step(1), (0..8).collect::<Vec<_>>());
        assert_eq!(s.step(2), (8..16).collect::<Vec<_>>());
    }

    #[test]
    fn escalates_to_all_experts() {
        let mut s = MocState::new(1, 64, 8, 0.01);
        s.add_processed(1000.0);
        for i in 0..4 {
            s.on_failure(i, 100.0);
        }
        let ks: Vec<u32> = s.k_history.iter().map(|x| x.1).collect();
        assert_eq!(ks, vec![8, 16, 32, 64]);
        assert_eq!(s.fraction(), 1.0);
    }

    #[test]
    fn full_k_snapshots_everything() {
        let m = ModelSpec::uniform(2, 4, 1, 1).unwrap();
        let mut s = MocState::new(2, 4, 4, 0.01);
        let mut ops = s.step_operators(&m, 1);
        ops.sort();
        assert_eq!(ops, m.operators.iter().map(|o| o.id).collect::<Vec<_>>());
        assert_eq!(s.stale_token_loss(1, 100.0, &[0.25; 4]), 0.0);
    }

    #[test]
    fn stale_experts_lose_tokens() {
        let mut s = MocState::new(1, 4, 1, 0.01);
        for t in 1..=4 {
            s.step(t);
        }
        // Snapshots at 1..4 for experts 0..3; failing at 5 loses 4,3,2,1 iterations.
        let lost = s.stale_token_loss(5, 10.0, &[0.25; 4]);
        assert!((lost - 25.0).abs() < 1e-12);
    }
}
