use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Herfindahl-Hirschman index, the sum of squared shares.
pub fn hhi(p: &[f64]) -> f64 {
    p.iter().map(|x| x * x).sum()
}

/// HHI rescaled so that a uniform vector gives 0 and a one-hot vector 1.
pub fn skewness(p: &[f64]) -> Result<f64> {
    let e = p.len();
    if e < 2 {
        return Err(Error::invalid(format!("skewness needs at least 2 experts, got {e}")));
    }
    let floor = 1.0 / e as f64;
    Ok((hhi(p) - floor) / (1.0 - floor))
}

/// Symmetric Dirichlet concentration, or the uniform limit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concentration {
    Alpha(f64),
    Uniform,
}

impl Concentration {
    pub fn alpha(self) -> Option<f64> {
        match self {
            Concentration::Alpha(a) => Some(a),
            Concentration::Uniform => None,
        }
    }
}

/// Concentration whose expected HHI, (α+1)/(αE+1), matches the target skewness.
pub fn alpha_for_skew(s_target: f64, experts: u32) -> Result<Concentration> {
    if experts < 2 {
        return Err(Error::invalid(format!("alpha_for_skew needs at least 2 experts, got {experts}")));
    }
    if !(0.0..1.0).contains(&s_target) {
        return Err(Error::invalid(format!("target skewness must lie in [0, 1), got {s_target}")));
    }
    if s_target == 0.0 {
        return Ok(Concentration::Uniform);
    }
    let e = experts as f64;
    let h = s_target * (1.0 - 1.0 / e) + 1.0 / e;
    Ok(Concentration::Alpha((1.0 - h) / (h * e - 1.0)))
}

/// Expected skewness of a symmetric Dirichlet draw.
pub fn expected_skewness(c: Concentration, experts: u32) -> f64 {
    let e = experts as f64;
    match c {
        Concentration::Uniform => 0.0,
        Concentration::Alpha(a) => {
            let h = (a + 1.0) / (a * e + 1.0);
            (h - 1.0 / e) / (1.0 - 1.0 / e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn index_examples() {
        let u = vec![1.0 / 64.0; 64];
        assert!((hhi(&u) - 1.0 / 64.0).abs() < 1e-15);
        assert!(skewness(&u).unwrap().abs() < 1e-12);
        let mut one = vec![0.0; 64];
        one[5] = 1.0;
        assert_eq!(hhi(&one), 1.0);
        assert!((skewness(&one).unwrap() - 1.0).abs() < 1e-12);
        let half = [0.5, 0.5, 0.0, 0.0];
        assert_eq!(hhi(&half), 0.5);
        assert!((skewness(&half).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(skewness(&[1.0]).is_err());
    }

    #[test]
    fn published_alphas() {
        let want = [(0.25, 0.0469), (0.5, 0.0156), (0.75, 0.0052)];
        for (s, a) in want {
            let got = alpha_for_skew(s, 64).unwrap().alpha().unwrap();
            let rel = (got - a).abs() / a;
            assert!(rel < 5e-3, "S={s}: {got} vs {a}");
        }
        assert_eq!(alpha_for_skew(0.5, 64).unwrap(), Concentration::Alpha(0.015625));
        assert_eq!(alpha_for_skew(0.0, 64).unwrap(), Concentration::Uniform);
        assert!(alpha_for_skew(1.0, 64).is_err());
        assert!(alpha_for_skew(0.5, 1).is_err());
    }

    proptest! {
        #[test]
        fn inverse_identity(s in 0.001f64..0.999, e in 2u32..512) {
            let c = alpha_for_skew(s, e).unwrap();
            prop_assert!((expected_skewness(c, e) - s).abs() < 1e-9);
        }

        #[test]
        fn skewness_in_unit_interval(raw in prop::collection::vec(0.0f64..1.0, 2..40)) {
            let t: f64 = raw.iter().sum();
            prop_assume!(t > 0.0);
            let p: Vec<f64> = raw.iter().map(|x| x / t).collect();
            let s = skewness(&p).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&s));
        }
    }
}
