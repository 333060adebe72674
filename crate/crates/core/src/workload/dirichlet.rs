use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::skew::{skewness, Concentration};
use crate::{Error, Result};

/// Share of routed tokens per expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopularityVector {
    pub p: Vec<f64>,
}

impl PopularityVector {
    pub fn uniform(experts: u32) -> Self {
        PopularityVector { p: vec![1.0 / experts as f64; experts as usize] }
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(w: &[f64]) -> Result<Self> {
        let t: f64 = w.iter().sum();
        if w.is_empty() || w.iter().any(|x| !(*x >= 0.0)) || !(t > 0.0) || !t.is_finite() {
            return Err(Error::invalid("popularity weights must be non-negative with a positive sum"));
        }
        Ok(PopularityVector { p: w.iter().map(|x| x / t).collect() })
    }

    pub fn experts(&self) -> u32 {
        self.p.len() as u32
    }

    pub fn hhi(&self) -> f64 {
        super::hhi(&self.p)
    }

    pub fn skewness(&self) -> Result<f64> {
        skewness(&self.p)
    }
}

/// One draw from a symmetric Dirichlet.
///
/// Gamma variates are kept in log space: for shape α < 1,
/// log G(α) = log G(α+1) + ln(U)/α, which stays finite for the tiny
/// concentrations that high skew needs.
pub fn sample_popularity<R: Rng + ?Sized>(c: Concentration, experts: u32, rng: &mut R) -> Result<PopularityVector> {
    if experts == 0 {
        return Err(Error::invalid("popularity needs at least one expert"));
    }
    let alpha = match c {
        Concentration::Uniform => return Ok(PopularityVector::uniform(experts)),
        Concentration::Alpha(a) if a > 0.0 && a.is_finite() => a,
        Concentration::Alpha(a) => return Err(Error::invalid(format!("Dirichlet concentration must be positive, got {a}"))),
    };
    let logs: Vec<f64> = if alpha >= 1.0 {
        let g = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
        (0..experts).map(|_| g.sample(rng).ln()).collect()
    } else {
        let g = Gamma::new(alpha + 1.0, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
        (0..experts)
            .map(|_| {
                let u: f64 = 1.0 - rng.random::<f64>();
                g.sample(rng).ln() + u.ln() / alpha
            })
            .collect()
    };
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    PopularityVector::from_weights(&w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::alpha_for_skew;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seeded_draws_repeat() {
        let c = Concentration::Alpha(0.3);
        let a = sample_popularity(c, 16, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_popularity(c, 16, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert!((a.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn huge_alpha_is_nearly_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_popularity(Concentration::Alpha(1e6), 64, &mut rng).unwrap();
        assert!(p.skewness().unwrap() < 0.01);
    }

    #[test]
    fn tiny_alpha_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = sample_popularity(Concentration::Alpha(1e-4), 64, &mut rng).unwrap();
        assert!(p.p.iter().all(|x| x.is_finite()));
        assert!((p.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_skew_tracks_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = alpha_for_skew(0.5, 64).unwrap();
        let n = 4000;
        let mean: f64 = (0..n).map(|_| sample_popularity(c, 64, &mut rng).unwrap().skewness().unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.03, "{mean}");
    }

    #[test]
    fn rejects_bad_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_popularity(Concentration::Alpha(0.0), 4, &mut rng).is_err());
        assert!(sample_popularity(Concentration::Alpha(f64::NAN), 4, &mut rng).is_err());
    }
}
