use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam step. `step` is incremented first and the
/// correction uses its new value. Arithmetic runs in `f64`; results are
/// stored back as `f32`.
pub fn adam_step(master: &mut [f32], m: &mut [f32], v: &mut [f32], grad: &[f32], step: &mut u64, h: AdamHyper) {
    *step += 1;
    let t = *step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for i in 0..master.len() {
        let g = grad[i] as f64;
        let mi = h.beta1 * m[i] as f64 + (1.0 - h.beta1) * g;
        let vi = h.beta2 * v[i] as f64 + (1.0 - h.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let update = h.lr * (mi / c1) / ((vi / c2).sqrt() + h.eps);
        master[i] = (master[i] as f64 - update) as f32;
    }
}

pub fn sgd_step(master: &mut [f32], grad: &[f32], step: &mut u64, lr: f64) {
    *step += 1;
    for (w, g) in master.iter_mut().zip(grad) {
        *w = (*w as f64 - lr * *g as f64) as f32;
    }
}

impl Optimizer {
    pub fn apply(&self, master: &mut [f32], m: &mut [f32], v: &mut [f32], grad: &[f32], step: &mut u64) {
        match *self {
            Optimizer::Sgd { lr } => sgd_step(master, grad, step, lr),
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                adam_step(master, m, v, grad, step, AdamHyper { lr, beta1, beta2, eps })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: AdamHyper = AdamHyper { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 };

    fn run(w0: f32, grads: &[f32], h: AdamHyper) -> f32 {
        let (mut w, mut m, mut v, mut s) = ([w0], [0.0], [0.0], 0);
        for g in grads {
            adam_step(&mut w, &mut m, &mut v, &[*g], &mut s, h);
        }
        w[0]
    }

    #[test]
    fn zero_gradient_is_inert() {
        let (mut w, mut m, mut v, mut s) = ([0.7f32], [0.0f32], [0.0f32], 0);
        adam_step(&mut w, &mut m, &mut v, &[0.0], &mut s, H);
        assert_eq!((w[0], m[0], v[0], s), (0.7, 0.0, 0.0, 1));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = [0.0f32];
        let (mut m, mut v, mut s) = ([0.0f32], [0.0f32], 0);
        adam_step(&mut w, &mut m, &mut v, &[1.0], &mut s, H);
        let expected = -0.001 / (1.0 + 1e-8);
        assert_eq!(w[0], expected as f32);
        assert!((w[0] as f64 + 0.001).abs() < 1e-9);
    }

    #[test]
    fn changing_gradients_differ_from_one_doubled_step() {
        let two = run(0.0, &[1.0, 0.25], H);
        let doubled = run(0.0, &[1.0], AdamHyper { lr: 2.0 * H.lr, ..H });
        assert_ne!(two, doubled);
    }

    #[test]
    fn constant_gradient_steps_match_doubled_lr_up_to_rounding() {
        // With a constant gradient the bias-corrected ratio is exactly 1 at
        // every step, so the difference is pure floating-point rounding.
        let two = run(0.0, &[1.0, 1.0], H) as f64;
        let doubled = run(0.0, &[1.0], AdamHyper { lr: 2.0 * H.lr, ..H }) as f64;
        assert!((two - doubled).abs() < 1e-8, "{two} vs {doubled}");
    }

    #[test]
    fn sgd_scalar_step() {
        let mut w = [1.0f32];
        let mut s = 0;
        sgd_step(&mut w, &[4.0], &mut s, 0.1);
        assert_eq!(w[0], 0.6);
        assert_eq!(s, 1);
    }
}
