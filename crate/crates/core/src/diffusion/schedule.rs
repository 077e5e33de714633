use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Offset that keeps the clean endpoint slightly away from the origin.
const COSINE_OFFSET: f64 = 0.008;

/// Variance-preserving cosine schedule over integer steps `0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    weight: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `α_t = cos(φ_t)`, `σ_t = sin(φ_t)` with
    /// `φ_t = (t/T + s)/(1 + s) · π/2`, and unit loss weights.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config(format!("noise schedule needs T >= 2, got {steps}")));
        }
        let phase = |t: usize| (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2;
        let alpha = (0..=steps).map(|t| phase(t).cos().max(0.0)).collect();
        let sigma = (0..=steps).map(|t| phase(t).sin()).collect();
        Ok(Self {
            alpha,
            sigma,
            weight: vec![1.0; steps + 1],
        })
    }

    /// `T`, the index of the pure-noise endpoint.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn weight(&self, t: usize) -> f64 {
        self.weight[t]
    }

    /// `α_t·x + σ_t·ε`.
    pub fn forward_noise(&self, x: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        let mut out = x.scale(self.alpha(t));
        out.add_scaled(eps, self.sigma(t))?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RandomSource;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_unit_norm() {
        let s = NoiseSchedule::cosine(100).unwrap();
        assert!(s.alpha(0) >= 0.999);
        assert!(s.sigma(0) < 0.02);
        assert!(s.alpha(100) < 1e-12);
        assert!((s.sigma(100) - 1.0).abs() < 1e-12);
        for t in 0..=100 {
            assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-12);
            assert_eq!(s.weight(t), 1.0);
            if t > 0 {
                assert!(s.alpha(t) <= s.alpha(t - 1));
            }
        }
    }

    #[test]
    fn rejects_short_schedules() {
        assert!(NoiseSchedule::cosine(1).is_err());
        assert!(NoiseSchedule::cosine(2).is_ok());
    }

    #[test]
    fn forward_noise_special_cases() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let mut rng = RandomSource::new(4);
        let x = rng.normal_tensor(&[16, 16], 1.0);
        let e = rng.normal_tensor(&[16, 16], 1.0);
        let zero = Tensor::zeros(&[16, 16]);

        let at0 = s.forward_noise(&x, 0, &e).unwrap();
        assert!(at0.max_abs_diff(&x) < 0.02 * 4.0 + 1e-3 * 4.0);
        assert_eq!(s.forward_noise(&x, 17, &zero).unwrap(), x.scale(s.alpha(17)));
        assert_eq!(s.forward_noise(&zero, 17, &e).unwrap(), e.scale(s.sigma(17)));
        assert!(s.forward_noise(&x, 3, &Tensor::zeros(&[4])).is_err());
    }

    proptest! {
        #[test]
        fn forward_noise_is_linear(seed in any::<u64>(), a in -10.0f64..10.0, t in 0usize..=40) {
            let s = NoiseSchedule::cosine(40).unwrap();
            let mut rng = RandomSource::new(seed);
            let x = rng.normal_tensor(&[16, 16], 1.0);
            let e = rng.normal_tensor(&[16, 16], 1.0);
            let lhs = s.forward_noise(&x.scale(a), t, &e.scale(a)).unwrap();
            let rhs = s.forward_noise(&x, t, &e).unwrap().scale(a);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }
}
