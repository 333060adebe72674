use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Bytes per parameter for each class of training state.
///
/// `optimizer_bytes` is the sum over every optimizer tensor, e.g. two FP32
/// Adam moments count as 8.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionPlan {
    pub compute_bytes: u32,
    pub master_bytes: u32,
    pub optimizer_bytes: u32,
}

impl Default for PrecisionPlan {
    fn default() -> Self {
        PrecisionPlan { compute_bytes: 2, master_bytes: 4, optimizer_bytes: 8 }
    }
}

impl PrecisionPlan {
    pub fn new(compute_bytes: u32, master_bytes: u32, optimizer_bytes: u32) -> Result<Self> {
        let plan = PrecisionPlan { compute_bytes, master_bytes, optimizer_bytes };
        plan.check()?;
        Ok(plan)
    }

    pub fn check(&self) -> Result<()> {
        if self.compute_bytes == 0 || self.master_bytes == 0 || self.optimizer_bytes == 0 {
            return Err(Error::invalid(format!("precision plan fields must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Master weights plus optimizer state.
    pub fn full_bytes(&self) -> u32 {
        self.master_bytes + self.optimizer_bytes
    }

    /// The low-precision configurations evaluated for DeepSeek-style training,
    /// as (label, plan). Optimizer entries with two dtypes add both widths.
    pub fn low_precision_presets() -> Vec<(&'static str, PrecisionPlan)> {
        vec![
            ("fp16/fp16/fp16+fp16", PrecisionPlan { compute_bytes: 2, master_bytes: 2, optimizer_bytes: 4 }),
            ("fp8/fp32/fp32+fp32", PrecisionPlan { compute_bytes: 1, master_bytes: 4, optimizer_bytes: 8 }),
            ("fp8/fp16/fp32+fp32", PrecisionPlan { compute_bytes: 1, master_bytes: 2, optimizer_bytes: 8 }),
            ("fp8/fp16/fp8+fp16", PrecisionPlan { compute_bytes: 1, master_bytes: 2, optimizer_bytes: 3 }),
            ("fp8/fp8/fp8+fp16", PrecisionPlan { compute_bytes: 1, master_bytes: 1, optimizer_bytes: 3 }),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_mixed_fp16_fp32_adam() {
        let p = PrecisionPlan::default();
        assert_eq!((p.compute_bytes, p.master_bytes, p.optimizer_bytes), (2, 4, 8));
        assert_eq!(p.full_bytes(), 12);
    }

    #[test]
    fn zero_width_rejected() {
        assert!(PrecisionPlan::new(0, 4, 8).is_err());
        assert!(PrecisionPlan::new(2, 4, 0).is_err());
    }

    #[test]
    fn fp8_state_plan_is_four_bytes_full() {
        let (_, p) = PrecisionPlan::low_precision_presets()
            .into_iter()
            .find(|(l, _)| *l == "fp8/fp8/fp8+fp16")
            .unwrap();
        assert_eq!(p.full_bytes(), 4);
    }
}
