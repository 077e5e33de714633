use crate::error::{Error, Result};
use crate::numerics::{RandomSource, Tape, Tensor};

use super::denoiser::{Adaptation, Denoiser, DenoiserInput};
use super::scene::{unpatchify, SceneImage, IMAGE_SIZE};
use super::schedule::NoiseSchedule;

/// Integer steps visited by an `n`-step sampler, from `T` down to 0.
pub fn timestep_grid(schedule: &NoiseSchedule, n: usize) -> Vec<usize> {
    let total = schedule.steps();
    let n = n.min(total);
    (0..=n)
        .rev()
        .map(|k| ((k * total) as f64 / n as f64).round() as usize)
        .collect()
}

/// Deterministic x-prediction sampler.
///
/// Starts from Gaussian noise drawn from `rng` and, on each step, predicts
/// the clean image, clamps it to `[0, 1]`, infers the implied noise and
/// re-noises to the next (lower) step without injecting fresh noise. The
/// last clean prediction is returned.
pub fn sample<A: Adaptation>(
    model: &Denoiser,
    adapt: &A,
    schedule: &NoiseSchedule,
    cond: &[f64],
    rng: &mut RandomSource,
    steps: usize,
) -> Result<SceneImage> {
    sample_observed(model, adapt, schedule, cond, rng, steps, |_, _| {})
}

/// [`sample`] with a hook called after every denoiser evaluation.
pub fn sample_observed<A, F>(
    model: &Denoiser,
    adapt: &A,
    schedule: &NoiseSchedule,
    cond: &[f64],
    rng: &mut RandomSource,
    steps: usize,
    mut observe: F,
) -> Result<SceneImage>
where
    A: Adaptation,
    F: FnMut(&Tape, &A::Bound),
{
    if steps == 0 {
        return Err(Error::config("sampler needs at least one step"));
    }
    let grid = timestep_grid(schedule, steps);
    let total = schedule.steps() as f64;
    let mut z = rng.normal_tensor(&[IMAGE_SIZE, IMAGE_SIZE], 1.0);
    let mut x_hat = Tensor::zeros(&[IMAGE_SIZE, IMAGE_SIZE]);
    for pair in grid.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let pred = model.predict_observed(
            adapt,
            &DenoiserInput {
                noisy: &z,
                cond,
                t_frac: t as f64 / total,
            },
            &mut observe,
        )?;
        x_hat = unpatchify(&pred).map(|v| v.clamp(0.0, 1.0));
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let mut eps = z.clone();
        eps.add_scaled(&x_hat, -a)?;
        let eps = eps.scale(1.0 / s);
        z = x_hat.scale(schedule.alpha(t_next));
        z.add_scaled(&eps, schedule.sigma(t_next))?;
    }
    SceneImage::new(x_hat)
}
