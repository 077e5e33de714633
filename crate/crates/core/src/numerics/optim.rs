use std::f64::consts::PI;

use crate::error::Result;

use super::param::ParamSet;
use super::tensor::Tensor;

/// Adam over the trainable members of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update with learning rate `lr` and clears gradients.
    /// Frozen parameters are neither read nor written.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *w -= lr * update;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (PI * progress).cos())
}

/// Scales all trainable gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for p in params.iter_mut().filter(|p| p.trainable) {
            p.grad = p.grad.scale(f);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Parameter;

    #[test]
    fn adam_minimises_quadratic() {
        let mut ps = ParamSet::new();
        ps.insert(Parameter::new("w", Tensor::vector(&[4.0, -3.0]), true))
            .unwrap();
        let mut opt = Adam::new(&ps);
        for _ in 0..2000 {
            let w = ps.get(0).value.clone();
            ps.get_mut(0).grad = w.scale(2.0);
            opt.step(&mut ps, 0.05).unwrap();
        }
        assert!(ps.get(0).value.data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_and_zero_lr_are_untouched() {
        let mut ps = ParamSet::new();
        ps.insert(Parameter::new("a", Tensor::vector(&[1.0, 0.0]), true))
            .unwrap();
        ps.insert(Parameter::new("b", Tensor::vector(&[2.0]), false)).unwrap();
        let before = ps.clone();
        ps.get_mut(0).grad = Tensor::vector(&[0.3, -0.7]);
        ps.get_mut(1).grad = Tensor::vector(&[5.0]);
        let mut opt = Adam::new(&ps);
        opt.step(&mut ps, 0.0).unwrap();
        for (a, b) in ps.iter().zip(before.iter()) {
            let same = a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0, 100), 1e-4);
        assert!((cosine_lr(1e-4, 50, 100) - 5e-5).abs() < 1e-18);
        assert!(cosine_lr(1e-4, 100, 100).abs() < 1e-20);
    }
}
