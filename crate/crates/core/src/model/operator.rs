use std::fmt;

use serde::{Deserialize, Serialize};

/// Index of an operator in its model's canonical operator list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OperatorId(pub u32);

impl fmt::Display for OperatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "op{}", self.0)
    }
}

impl OperatorId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorKind {
    Expert { layer: u32, expert: u32, capacity: u64 },
    NonExpert { layer: u32 },
    Gate { layer: u32 },
}

impl OperatorKind {
    pub fn layer(&self) -> u32 {
        match *self {
            OperatorKind::Expert { layer, .. }
            | OperatorKind::NonExpert { layer }
            | OperatorKind::Gate { layer } => layer,
        }
    }

    pub fn is_expert(&self) -> bool {
        matches!(self, OperatorKind::Expert { .. })
    }
}

/// Activation statistics for one operator.
///
/// `hard` counts routed tokens, `soft` sums gating probabilities and `ema`
/// is the time-decayed per-batch count. `hard` and `soft` only grow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Popularity {
    pub hard: u64,
    pub soft: f64,
    pub ema: f64,
}

impl Popularity {
    /// Folds one mini-batch into the counters.
    pub fn observe(&mut self, batch_count: u64, prob_sum: f64, decay: f64) {
        self.hard += batch_count;
        self.soft += prob_sum;
        self.ema = decay * self.ema + (1.0 - decay) * batch_count as f64;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorDescriptor {
    pub id: OperatorId,
    pub kind: OperatorKind,
    pub param_count: u64,
    pub popularity: Popularity,
}

impl OperatorDescriptor {
    pub fn label(&self) -> String {
        match self.kind {
            OperatorKind::Expert { layer, expert, .. } => format!("L{layer}.E{expert}"),
            OperatorKind::NonExpert { layer } => format!("L{layer}.NE"),
            OperatorKind::Gate { layer } => format!("L{layer}.G"),
        }
    }
}
