use serde::{Deserialize, Serialize};

use crate::model::{OperatorDescriptor, OperatorId, OperatorKind};
use crate::{Error, Result};

/// How experts are ranked before they are packed into window slots.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum OrderingScheme {
    /// Routed-token counts.
    HardCount,
    /// Summed gating probabilities.
    SoftCount,
    /// Exponential moving average of per-batch counts with decay `alpha`.
    TimeDecayed { alpha: f64 },
    /// Routed tokens divided by capacity.
    CapacityAware,
    /// Operator id order, ignoring popularity.
    ById,
}

fn score(op: &OperatorDescriptor, scheme: OrderingScheme) -> Result<f64> {
    let p = &op.popularity;
    Ok(match scheme {
        OrderingScheme::HardCount => p.hard as f64,
        OrderingScheme::SoftCount => p.soft,
        OrderingScheme::TimeDecayed { .. } => p.ema,
        OrderingScheme::CapacityAware => match op.kind {
            OperatorKind::Expert { capacity, .. } if capacity > 0 => p.hard as f64 / capacity as f64,
            _ => return Err(Error::invalid(format!("operator {} has no capacity", op.id))),
        },
        OrderingScheme::ById => op.id.0 as f64,
    })
}

/// Experts in ascending score (ties by id), then each layer's non-expert
/// and gate operators in layer order.
pub fn order_operators(ops: &[OperatorDescriptor], scheme: OrderingScheme) -> Result<Vec<OperatorId>> {
    let mut experts = Vec::new();
    for op in ops.iter().filter(|o| o.kind.is_expert()) {
        experts.push((score(op, scheme)?, op.id));
    }
    experts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut rest: Vec<&OperatorDescriptor> = ops.iter().filter(|o| !o.kind.is_expert()).collect();
    rest.sort_by_key(|o| {
        let rank = match o.kind {
            OperatorKind::NonExpert { .. } => 0,
            _ => 1,
        };
        (o.kind.layer(), rank, o.id)
    });
    Ok(experts.into_iter().map(|(_, id)| id).chain(rest.into_iter().map(|o| o.id)).collect())
}

/// Folds one batch of routed-token counts and gate probabilities into the
/// experts' popularity; `alpha` is the decay of the moving average.
pub fn observe_batch(ops: &mut [OperatorDescriptor], counts: &[u64], prob_sums: &[f64], alpha: f64) {
    for (op, (c, p)) in ops.iter_mut().filter(|o| o.kind.is_expert()).zip(counts.iter().zip(prob_sums)) {
        op.popularity.observe(*c, *p, alpha);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, Popularity};
    use proptest::prelude::*;

    fn model(hard: &[u64]) -> ModelSpec {
        let mut m = ModelSpec::uniform(1, hard.len() as u32, 1, 10).unwrap();
        for (op, h) in m.operators.iter_mut().zip(hard) {
            op.popularity.hard = *h;
        }
        m
    }

    #[test]
    fn hard_counts_ascending() {
        let m = model(&[5, 1, 3]);
        let order = order_operators(&m.operators, OrderingScheme::HardCount).unwrap();
        assert_eq!(&order[..3], &[OperatorId(1), OperatorId(2), OperatorId(0)]);
        assert_eq!(&order[3..], &[m.non_expert_op(0), m.gate_op(0)]);
    }

    #[test]
    fn capacity_normalizes() {
        let mut m = model(&[10, 10]);
        if let OperatorKind::Expert { capacity, .. } = &mut m.operators[1].kind {
            *capacity = 2;
        }
        let order = order_operators(&m.operators, OrderingScheme::CapacityAware).unwrap();
        assert_eq!(&order[..2], &[OperatorId(1), OperatorId(0)]);
    }

    #[test]
    fn capacity_required() {
        let mut m = model(&[1]);
        if let OperatorKind::Expert { capacity, .. } = &mut m.operators[0].kind {
            *capacity = 0;
        }
        assert!(order_operators(&m.operators, OrderingScheme::CapacityAware).is_err());
    }

    #[test]
    fn decayed_ordering_uses_ema() {
        let mut m = model(&[0, 0]);
        m.operators[0].popularity = Popularity { hard: 0, soft: 0.0, ema: 10.0 };
        m.operators[1].popularity = Popularity { hard: 0, soft: 0.0, ema: 9.5 };
        observe_batch(&mut m.operators, &[0, 10], &[0.0, 1.0], 0.9);
        assert!((m.operators[0].popularity.ema - 9.0).abs() < 1e-12);
        let order = order_operators(&m.operators, OrderingScheme::TimeDecayed { alpha: 0.9 }).unwrap();
        assert_eq!(&order[..2], &[OperatorId(0), OperatorId(1)]);
    }

    #[test]
    fn non_experts_follow_layer_by_layer() {
        let m = ModelSpec::uniform(2, 2, 1, 1).unwrap();
        let order = order_operators(&m.operators, OrderingScheme::ById).unwrap();
        assert_eq!(
            order,
            vec![m.expert_op(0, 0), m.expert_op(0, 1), m.expert_op(1, 0), m.expert_op(1, 1), m.non_expert_op(0), m.gate_op(0), m.non_expert_op(1), m.gate_op(1)]
        );
    }

    proptest! {
        #[test]
        fn permutation_sorted_and_scale_free(counts in prop::collection::vec(0u64..1000, 1..40), k in 1u64..50) {
            let m = model(&counts);
            let order = order_operators(&m.operators, OrderingScheme::HardCount).unwrap();
            let mut sorted = order.clone();
            sorted.sort();
            prop_assert_eq!(sorted, m.operators.iter().map(|o| o.id).collect::<Vec<_>>());
            let n = counts.len();
            for w in order[..n].windows(2) {
                prop_assert!(counts[w[0].index()] <= counts[w[1].index()]);
            }
            let scaled = model(&counts.iter().map(|c| c * k).collect::<Vec<_>>());
            prop_assert_eq!(order, order_operators(&scaled.operators, OrderingScheme::HardCount).unwrap());
        }
    }
}
