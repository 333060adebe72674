use std::ops::RangeInclusive;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{stream, Batch, DataSource};
use super::log::{Direction, LogKey, LogSet};
use super::optim::Optimizer;
use super::quantize::quantize;
use super::tensor::{matvec, matvec_t_acc, outer_acc};
use super::TensorBuf;
use crate::model::{ModelSpec, OperatorId, OperatorKind, ParallelPlan, PrecisionPlan};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f32) -> f32 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn grad(self, y: f32) -> f32 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OperatorMode {
    Active,
    /// Holds compute weights only: runs forward and input gradients, skips
    /// weight gradients, gradient reduction and the optimizer.
    Frozen,
}

pub fn all_active(n: usize) -> Vec<OperatorMode> {
    vec![OperatorMode::Active; n]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub layers: u32,
    pub experts: u32,
    pub top_k: u32,
    /// Token width; every matrix is `dim x dim` except the `experts x dim` gate.
    pub dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "yes")]
    pub residual: bool,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub precision: PrecisionPlan,
    #[serde(default = "one")]
    pub pp_stages: u32,
    #[serde(default = "one")]
    pub dp_degree: u32,
    #[serde(default = "two")]
    pub microbatches: u32,
    #[serde(default = "two_usize")]
    pub tokens_per_microbatch: usize,
    #[serde(default = "default_init_scale")]
    pub init_scale: f32,
}

fn yes() -> bool {
    true
}
fn one() -> u32 {
    1
}
fn two() -> u32 {
    2
}
fn two_usize() -> usize {
    2
}
fn default_init_scale() -> f32 {
    0.5
}

impl ToyConfig {
    /// One layer of four experts with `dim = 4`, so every operator holds 16
    /// parameters.
    pub fn small() -> Self {
        ToyConfig {
            layers: 1,
            experts: 4,
            top_k: 2,
            dim: 4,
            activation: Activation::Tanh,
            residual: true,
            optimizer: Optimizer::default(),
            precision: PrecisionPlan::default(),
            pp_stages: 1,
            dp_degree: 1,
            microbatches: 2,
            tokens_per_microbatch: 2,
            init_scale: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub master: TensorBuf,
    pub m: TensorBuf,
    pub v: TensorBuf,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorState {
    pub compute: TensorBuf,
    /// Present exactly when the operator's full-precision state is resident.
    pub full: Option<FullState>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    /// Completed iterations.
    pub iteration: u64,
    /// Iterations of the data stream consumed.
    pub data_cursor: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub ops: Vec<OperatorState>,
    pub meta: Metadata,
}

impl TrainState {
    pub fn op(&self, id: OperatorId) -> Result<&OperatorState> {
        self.ops.get(id.index()).ok_or(Error::UnknownOperator(id))
    }
}

#[derive(Clone, Debug)]
struct TokenCache {
    h: Vec<f32>,
    a: Vec<f32>,
    u: Vec<f32>,
    sel: Vec<usize>,
    w: Vec<f32>,
    e: Vec<Vec<f32>>,
}

/// Forward intermediates of one stage for one micro-batch.
#[derive(Clone, Debug)]
pub struct StageCache {
    /// `layers[l][token]`
    layers: Vec<Vec<TokenCache>>,
}

/// Weight gradients, allocated only for operators that need them.
#[derive(Clone, Debug)]
pub struct Grads(Vec<Option<Vec<f32>>>);

/// The miniature MoE model plus its pipeline layout.
#[derive(Clone, Debug)]
pub struct Engine {
    pub cfg: ToyConfig,
    pub model: ModelSpec,
    pub plan: ParallelPlan,
}

impl Engine {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        if cfg.precision.master_bytes != 4 || cfg.precision.optimizer_bytes != 8 {
            return Err(Error::Config(format!(
                "the toy engine stores f32 masters and two f32 moments; got master={} optimizer={}",
                cfg.precision.master_bytes, cfg.precision.optimizer_bytes
            )));
        }
        cfg.precision.check()?;
        quantize(&TensorBuf::zeros(vec![1]), &cfg.precision)?;
        if cfg.dim == 0 || cfg.layers == 0 || cfg.tokens_per_microbatch == 0 || cfg.microbatches == 0 {
            return Err(Error::Config("toy dimensions must be positive".into()));
        }
        if cfg.pp_stages == 0 || cfg.pp_stages > cfg.layers {
            return Err(Error::Config(format!(
                "pp_stages = {} must be within 1..={} layers",
                cfg.pp_stages, cfg.layers
            )));
        }
        if cfg.dp_degree == 0 {
            return Err(Error::Config("dp_degree must be positive".into()));
        }
        let d = cfg.dim as u64;
        let model = ModelSpec::with_sizes("toy", cfg.layers, cfg.experts, cfg.top_k, d * d, d * d, cfg.experts as u64 * d)?;
        let tokens = cfg.tokens_per_microbatch as u32;
        let plan = ParallelPlan::layer_contiguous(
            &model,
            cfg.pp_stages,
            cfg.dp_degree,
            1,
            cfg.dp_degree * cfg.microbatches * tokens,
            tokens,
        );
        Ok(Engine { cfg, model, plan })
    }

    pub fn num_ops(&self) -> usize {
        self.model.operators.len()
    }

    pub fn stages(&self) -> u32 {
        self.plan.pp_stages
    }

    fn shape(&self, id: OperatorId) -> Vec<usize> {
        match self.model.operators[id.index()].kind {
            OperatorKind::Gate { .. } => vec![self.cfg.experts as usize, self.cfg.dim],
            _ => vec![self.cfg.dim, self.cfg.dim],
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.cfg.dp_degree as usize * self.cfg.microbatches as usize * self.cfg.tokens_per_microbatch
    }

    pub fn init_state(&self, seed: u64) -> Result<TrainState> {
        let ops = self
            .model
            .operators
            .iter()
            .map(|op| {
                let shape = self.shape(op.id);
                let mut rng = stream(seed, &[0x1417, op.id.0 as u64]);
                let s = self.cfg.init_scale;
                let n: usize = shape.iter().product();
                let values = (0..n).map(|_| rng.random_range(-s..s)).collect();
                self.fresh_op(TensorBuf::new(shape, values))
            })
            .collect::<Result<_>>()?;
        Ok(TrainState { ops, meta: Metadata { iteration: 0, data_cursor: 0, seed } })
    }

    /// Full-precision state with zero moments and compute weights derived
    /// from `master`.
    pub fn fresh_op(&self, master: TensorBuf) -> Result<OperatorState> {
        let compute = quantize(&master, &self.cfg.precision)?;
        let shape = master.shape.clone();
        Ok(OperatorState {
            compute,
            full: Some(FullState { m: TensorBuf::zeros(shape.clone()), v: TensorBuf::zeros(shape), master, step: 0 }),
        })
    }

    /// Replaces an operator's master weights and re-derives its compute weights.
    pub fn set_master(&self, state: &mut TrainState, id: OperatorId, values: Vec<f32>) -> Result<()> {
        let shape = self.shape(id);
        state.ops[id.index()] = self.fresh_op(TensorBuf::new(shape, values))?;
        Ok(())
    }

    /// Runs one full training iteration across all stages and replicas.
    pub fn run_iteration(
        &self,
        state: &mut TrainState,
        modes: &[OperatorMode],
        data: &dyn DataSource,
        logs: Option<&mut LogSet>,
    ) -> Result<f64> {
        self.execute(state, modes, 0..=self.stages() - 1, data, None, logs)
    }

    /// Runs one iteration restricted to a contiguous run of stages.
    ///
    /// Inputs to the first stage come from `read` unless it is stage 0, and
    /// the gradient arriving at the last stage comes from `read` unless it is
    /// the final stage. Every boundary entry the segment sends is written to
    /// `write`. Only operators of the segment are read or updated. Returns
    /// the loss when the segment owns the loss head, else 0.
    pub fn execute(
        &self,
        state: &mut TrainState,
        modes: &[OperatorMode],
        segment: RangeInclusive<u32>,
        data: &dyn DataSource,
        read: Option<&LogSet>,
        mut write: Option<&mut LogSet>,
    ) -> Result<f64> {
        let (first, last) = (*segment.start(), *segment.end());
        let last_stage = self.stages() - 1;
        if last > last_stage || first > last {
            return Err(Error::UnknownWorker { stage: last, replica: 0 });
        }
        let seg_ops: Vec<OperatorId> = segment.clone().flat_map(|s| self.plan.operators_in_stage(s)).collect();
        for &id in &seg_ops {
            match modes.get(id.index()) {
                None => return Err(Error::MissingMode(id)),
                Some(OperatorMode::Active) if state.ops[id.index()].full.is_none() => {
                    return Err(Error::MissingFullState(id))
                }
                _ => {}
            }
        }
        let n = state.meta.iteration + 1;
        let mut grads = Grads(
            (0..self.num_ops())
                .map(|i| {
                    let id = OperatorId(i as u32);
                    (modes.get(i) == Some(&OperatorMode::Active) && seg_ops.contains(&id))
                        .then(|| vec![0.0; self.shape(id).iter().product()])
                })
                .collect(),
        );
        let width = self.cfg.tokens_per_microbatch * self.cfg.dim;
        let scale = 1.0 / self.total_tokens() as f32;
        let mut loss = 0.0f64;

        for r in 0..self.cfg.dp_degree {
            for b in 0..self.cfg.microbatches {
                let key = |boundary, direction| LogKey { iteration: n, replica: r, microbatch: b, boundary, direction };
                let needs_data = first == 0 || last == last_stage;
                let batch = if needs_data { Some(self.fetch(data, n, r, b)?) } else { None };

                let mut x = if first == 0 {
                    batch.as_ref().unwrap().inputs.clone()
                } else {
                    let t = read.ok_or(Error::PipelineEnd("input", "activation log"))?.get(&key(first - 1, Direction::Activation))?;
                    check_len(t.len(), width)?;
                    t.values.clone()
                };
                let mut caches = Vec::with_capacity((last - first + 1) as usize);
                for s in segment.clone() {
                    let (y, c) = self.stage_forward(state, s, &x);
                    caches.push(c);
                    x = y;
                    if s < last_stage {
                        if let Some(w) = write.as_deref_mut() {
                            w.record(key(s, Direction::Activation), TensorBuf::new(vec![self.cfg.tokens_per_microbatch, self.cfg.dim], x.clone()));
                        }
                    }
                }

                let mut g = if last == last_stage {
                    let batch = batch.as_ref().unwrap();
                    let mut g = vec![0.0f32; width];
                    for i in 0..width {
                        let diff = x[i] - batch.targets[i];
                        loss += 0.5 * (diff as f64) * (diff as f64);
                        g[i] = diff * scale;
                    }
                    g
                } else {
                    let t = read.ok_or(Error::PipelineEnd("output", "gradient log"))?.get(&key(last, Direction::Gradient))?;
                    check_len(t.len(), width)?;
                    t.values.clone()
                };
                for (s, cache) in (first..last + 1).zip(caches).rev() {
                    g = self.stage_backward(state, s, &cache, &g, &mut grads);
                    if s > 0 {
                        if let Some(w) = write.as_deref_mut() {
                            w.record(key(s - 1, Direction::Gradient), TensorBuf::new(vec![self.cfg.tokens_per_microbatch, self.cfg.dim], g.clone()));
                        }
                    }
                }
            }
        }

        for &id in &seg_ops {
            if let Some(g) = &grads.0[id.index()] {
                let op = &mut state.ops[id.index()];
                let full = op.full.as_mut().expect("checked above");
                self.cfg.optimizer.apply(&mut full.master.values, &mut full.m.values, &mut full.v.values, g, &mut full.step);
                op.compute = quantize(&full.master, &self.cfg.precision)?;
            }
        }
        state.meta.iteration = n;
        state.meta.data_cursor = n;
        Ok(loss / self.total_tokens() as f64)
    }

    fn fetch(&self, data: &dyn DataSource, n: u64, r: u32, b: u32) -> Result<Batch> {
        let batch = data.microbatch(n, r, b)?;
        let want = self.cfg.tokens_per_microbatch * self.cfg.dim;
        if batch.tokens != self.cfg.tokens_per_microbatch || batch.inputs.len() != want || batch.targets.len() != want {
            return Err(Error::BatchMismatch {
                expected: format!("{} tokens x {}", self.cfg.tokens_per_microbatch, self.cfg.dim),
                found: format!("{} tokens, {} inputs, {} targets", batch.tokens, batch.inputs.len(), batch.targets.len()),
            });
        }
        Ok(batch)
    }

    /// Tokens routed to each expert operator during the next iteration,
    /// indexed by operator id (zero for non-experts). Does not modify state.
    pub fn routing_counts(&self, state: &TrainState, data: &dyn DataSource) -> Result<Vec<u64>> {
        let n = state.meta.iteration + 1;
        let mut counts = vec![0u64; self.num_ops()];
        for r in 0..self.cfg.dp_degree {
            for b in 0..self.cfg.microbatches {
                let mut x = self.fetch(data, n, r, b)?.inputs;
                for s in 0..self.stages() {
                    let (y, cache) = self.stage_forward(state, s, &x);
                    for (l, layer) in self.stage_layers(s).into_iter().zip(&cache.layers) {
                        for tok in layer {
                            for &j in &tok.sel {
                                counts[self.model.expert_op(l, j as u32).index()] += 1;
                            }
                        }
                    }
                    x = y;
                }
            }
        }
        Ok(counts)
    }

    fn stage_layers(&self, stage: u32) -> Vec<u32> {
        (0..self.cfg.layers).filter(|l| self.plan.stage_of(self.model.gate_op(*l)) == Some(stage)).collect()
    }

    /// Forward pass of one stage over a `tokens x dim` micro-batch, using
    /// compute weights for every operator.
    pub fn stage_forward(&self, state: &TrainState, stage: u32, input: &[f32]) -> (Vec<f32>, StageCache) {
        let d = self.cfg.dim;
        let e_count = self.cfg.experts as usize;
        let act = self.cfg.activation;
        let mut x = input.to_vec();
        let mut layers = Vec::new();
        for l in self.stage_layers(stage) {
            let ne = &state.ops[self.model.non_expert_op(l).index()].compute.values;
            let gate = &state.ops[self.model.gate_op(l).index()].compute.values;
            let mut caches = Vec::with_capacity(self.cfg.tokens_per_microbatch);
            let mut out = vec![0.0f32; x.len()];
            for (tok, o) in x.chunks(d).zip(out.chunks_mut(d)) {
                let h = tok.to_vec();
                let a: Vec<f32> = matvec(ne, d, d, &h).into_iter().map(|z| act.apply(z)).collect();
                let u: Vec<f32> = h.iter().zip(&a).map(|(h, a)| h + a).collect();
                let logits = matvec(gate, e_count, d, &u);
                let sel = top_k(&logits, self.cfg.top_k as usize);
                let w = softmax(&sel.iter().map(|&j| logits[j]).collect::<Vec<_>>());
                if self.cfg.residual {
                    o.copy_from_slice(&u);
                }
                let mut e = Vec::with_capacity(sel.len());
                for (&j, &wj) in sel.iter().zip(&w) {
                    let wj_mat = &state.ops[self.model.expert_op(l, j as u32).index()].compute.values;
                    let ej: Vec<f32> = matvec(wj_mat, d, d, &u).into_iter().map(|z| act.apply(z)).collect();
                    for (oi, ei) in o.iter_mut().zip(&ej) {
                        *oi += wj * ei;
                    }
                    e.push(ej);
                }
                caches.push(TokenCache { h, a, u, sel, w, e });
            }
            layers.push(caches);
            x = out;
        }
        (x, StageCache { layers })
    }

    /// Backward pass of one stage. Input gradients flow through every
    /// operator; weight gradients accumulate only where `grads` has a buffer.
    pub fn stage_backward(
        &self,
        state: &TrainState,
        stage: u32,
        cache: &StageCache,
        dout: &[f32],
        grads: &mut Grads,
    ) -> Vec<f32> {
        let d = self.cfg.dim;
        let e_count = self.cfg.experts as usize;
        let act = self.cfg.activation;
        let mut g_out = dout.to_vec();
        for (l, caches) in self.stage_layers(stage).into_iter().zip(&cache.layers).rev() {
            let ne_id = self.model.non_expert_op(l);
            let gate_id = self.model.gate_op(l);
            let ne = &state.ops[ne_id.index()].compute.values;
            let gate = &state.ops[gate_id.index()].compute.values;
            let mut g_in = vec![0.0f32; g_out.len()];
            for ((c, go), gi) in caches.iter().zip(g_out.chunks(d)).zip(g_in.chunks_mut(d)) {
                let mut du = if self.cfg.residual { go.to_vec() } else { vec![0.0; d] };
                let mut dw = Vec::with_capacity(c.sel.len());
                for ((&j, &wj), ej) in c.sel.iter().zip(&c.w).zip(&c.e) {
                    let id = self.model.expert_op(l, j as u32);
                    let dz: Vec<f32> = go.iter().zip(ej).map(|(g, y)| wj * g * act.grad(*y)).collect();
                    if let Some(buf) = grads.0[id.index()].as_mut() {
                        outer_acc(buf, d, d, &dz, &c.u);
                    }
                    matvec_t_acc(&state.ops[id.index()].compute.values, d, d, &dz, &mut du);
                    dw.push(go.iter().zip(ej).fold(0.0f32, |acc, (g, y)| acc + g * y));
                }
                let mean = c.w.iter().zip(&dw).fold(0.0f32, |acc, (w, g)| acc + w * g);
                let mut dlogits = vec![0.0f32; e_count];
                for ((&j, &wj), &g) in c.sel.iter().zip(&c.w).zip(&dw) {
                    dlogits[j] = wj * (g - mean);
                }
                if let Some(buf) = grads.0[gate_id.index()].as_mut() {
                    outer_acc(buf, e_count, d, &dlogits, &c.u);
                }
                matvec_t_acc(gate, e_count, d, &dlogits, &mut du);
                let da: Vec<f32> = du.iter().zip(&c.a).map(|(g, y)| g * act.grad(*y)).collect();
                if let Some(buf) = grads.0[ne_id.index()].as_mut() {
                    outer_acc(buf, d, d, &da, &c.h);
                }
                gi.copy_from_slice(&du);
                matvec_t_acc(ne, d, d, &da, gi);
            }
            g_out = g_in;
        }
        g_out
    }
}

fn check_len(found: usize, want: usize) -> Result<()> {
    if found != want {
        return Err(Error::BatchMismatch { expected: format!("{want} values"), found: format!("{found} values") });
    }
    Ok(())
}

/// Indices of the `k` largest scores; the lower index wins ties.
pub(crate) fn top_k(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn softmax(xs: &[f32]) -> Vec<f32> {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let ex: Vec<f32> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum = ex.iter().fold(0.0f32, |a, b| a + b);
    ex.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::data::{FixedData, SeededStream};

    fn scalar_engine() -> Engine {
        let cfg = ToyConfig {
            layers: 1,
            experts: 1,
            top_k: 1,
            dim: 1,
            activation: Activation::Identity,
            residual: false,
            optimizer: Optimizer::Sgd { lr: 0.1 },
            precision: PrecisionPlan::default(),
            pp_stages: 1,
            dp_degree: 1,
            microbatches: 1,
            tokens_per_microbatch: 1,
            init_scale: 0.5,
        };
        Engine::new(cfg).unwrap()
    }

    fn scalar_state(e: &Engine) -> TrainState {
        let mut s = e.init_state(0).unwrap();
        e.set_master(&mut s, e.model.expert_op(0, 0), vec![1.0]).unwrap();
        e.set_master(&mut s, e.model.non_expert_op(0), vec![0.0]).unwrap();
        s
    }

    fn scalar_data() -> FixedData {
        FixedData(Batch { tokens: 1, inputs: vec![2.0], targets: vec![0.0] })
    }

    #[test]
    fn scalar_sgd_step() {
        let e = scalar_engine();
        let mut s = scalar_state(&e);
        let loss = e.run_iteration(&mut s, &all_active(3), &scalar_data(), None).unwrap();
        assert_eq!(loss, 2.0);
        let w = &s.ops[0].full.as_ref().unwrap().master.values;
        assert_eq!(w[0], 0.6);
        assert_eq!(s.meta.iteration, 1);
    }

    #[test]
    fn frozen_scalar_is_unchanged() {
        let e = scalar_engine();
        let mut s = scalar_state(&e);
        let before = s.ops[0].clone();
        let mut modes = all_active(3);
        modes[0] = OperatorMode::Frozen;
        let loss = e.run_iteration(&mut s, &modes, &scalar_data(), None).unwrap();
        assert_eq!(loss, 2.0);
        assert_eq!(s.ops[0], before);
    }

    #[test]
    fn compute_weights_track_masters() {
        let e = Engine::new(ToyConfig::small()).unwrap();
        let mut s = e.init_state(3).unwrap();
        let data = SeededStream { seed: 3, tokens: 2, dim: 4 };
        for _ in 0..3 {
            e.run_iteration(&mut s, &all_active(e.num_ops()), &data, None).unwrap();
        }
        for op in &s.ops {
            let q = quantize(&op.full.as_ref().unwrap().master, &e.cfg.precision).unwrap();
            assert!(q.bit_eq(&op.compute));
        }
    }

    #[test]
    fn missing_mode_and_batch_mismatch() {
        let e = Engine::new(ToyConfig::small()).unwrap();
        let mut s = e.init_state(1).unwrap();
        let data = SeededStream { seed: 1, tokens: 2, dim: 4 };
        assert!(matches!(
            e.run_iteration(&mut s, &all_active(3), &data, None),
            Err(Error::MissingMode(OperatorId(3)))
        ));
        let wrong = SeededStream { seed: 1, tokens: 3, dim: 4 };
        assert!(matches!(
            e.run_iteration(&mut s, &all_active(e.num_ops()), &wrong, None),
            Err(Error::BatchMismatch { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut cfg = ToyConfig::small();
        cfg.optimizer = Optimizer::Sgd { lr: 1.0 };
        cfg.precision = PrecisionPlan::new(4, 4, 8).unwrap();
        let e = Engine::new(cfg).unwrap();
        let s0 = e.init_state(11).unwrap();
        let data = SeededStream { seed: 11, tokens: 2, dim: 4 };
        let loss_at = |s: &TrainState| {
            let mut s = s.clone();
            let modes = vec![OperatorMode::Frozen; e.num_ops()];
            e.run_iteration(&mut s, &modes, &data, None).unwrap()
        };
        let mut stepped = s0.clone();
        e.run_iteration(&mut stepped, &all_active(e.num_ops()), &data, None).unwrap();
        for op in [0usize, 4, 5] {
            for i in [0usize, 5] {
                let w0 = s0.ops[op].full.as_ref().unwrap().master.values[i];
                let grad = (w0 - stepped.ops[op].full.as_ref().unwrap().master.values[i]) as f64;
                let h = 1e-2f32;
                let mut plus = s0.clone();
                let mut minus = s0.clone();
                plus.ops[op].compute.values[i] = w0 + h;
                minus.ops[op].compute.values[i] = w0 - h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h as f64);
                assert!((fd - grad).abs() < 2e-3 + 0.05 * grad.abs(), "op {op} idx {i}: fd {fd} vs {grad}");
            }
        }
    }

    #[test]
    fn top_k_prefers_lower_index_on_ties() {
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k(&[2.0, 2.0, 2.0], 1), vec![0]);
    }
}
