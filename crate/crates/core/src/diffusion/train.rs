use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    clip_grad_norm, cosine_lr, Adam, BoundParams, Gradients, ParamSet, RandomSource, Tape, Tensor, Var,
};

use super::denoiser::{Adaptation, Denoiser, DenoiserInput, NoAdaptation};
use super::scene::{patchify, render_varied, SceneAttributes, SceneImage, IMAGE_SIZE};
use super::schedule::NoiseSchedule;

/// A conditioning vector paired with its target image.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub cond: Vec<f64>,
    pub image: SceneImage,
}

/// One noised training draw: which example, at which step, with which noise.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub example: usize,
    pub t: usize,
    pub eps: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    #[serde(default)]
    pub clip: f64,
}

/// Per-step mean batch loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    fn decile_mean(&self, last: bool) -> f64 {
        let n = self.losses.len();
        let k = (n / 10).max(1).min(n);
        let slice = if last { &self.losses[n - k..] } else { &self.losses[..k] };
        slice.iter().sum::<f64>() / k as f64
    }

    /// Mean loss over the first 10% of steps.
    pub fn first_decile(&self) -> f64 {
        self.decile_mean(false)
    }

    /// Mean loss over the final 10% of steps.
    pub fn last_decile(&self) -> f64 {
        self.decile_mean(true)
    }
}

/// Scenes drawn uniformly over attribute combinations and rendered with
/// [`render_varied`]. A fraction `mislabel_rate` of examples is rendered
/// with one attribute different from the one in its conditioning vector.
pub fn procedural_dataset(n: usize, mislabel_rate: f64, rng: &mut RandomSource) -> Vec<TrainingExample> {
    let all = SceneAttributes::all();
    (0..n)
        .map(|_| {
            let attrs = all[rng.below(all.len())];
            let mut shown = attrs;
            if rng.uniform() < mislabel_rate {
                match rng.below(3) {
                    0 => shown.shape = shown.shape.other(),
                    1 => shown.quadrant = shown.quadrant.opposite(),
                    _ => shown.intensity = shown.intensity.next(),
                }
            }
            TrainingExample {
                cond: attrs.conditioning(),
                image: render_varied(&shown, rng),
            }
        })
        .collect()
}

/// `w_t · mean((prediction − x)²)` for a prediction in patch layout.
pub fn prediction_loss(tape: &mut Tape, prediction: Var, target: &SceneImage, weight: f64) -> Result<Var> {
    let target = tape.constant(patchify(target.pixels()));
    let mse = tape.mse(prediction, target)?;
    Ok(tape.scale(mse, weight))
}

/// Records the x-prediction objective for one example on `tape`:
/// `w_t · ‖x̂(α_t x + σ_t ε, c) − x‖²`, averaged over pixels.
#[allow(clippy::too_many_arguments)]
pub fn denoise_loss_on_tape<A: Adaptation>(
    tape: &mut Tape,
    model: &Denoiser,
    bound: &BoundParams,
    adapt: &A,
    adapt_bound: &mut A::Bound,
    schedule: &NoiseSchedule,
    example: &TrainingExample,
    t: usize,
    eps: &Tensor,
) -> Result<Var> {
    let noisy = schedule.forward_noise(example.image.pixels(), t, eps)?;
    let input = DenoiserInput {
        noisy: &noisy,
        cond: &example.cond,
        t_frac: t as f64 / schedule.steps() as f64,
    };
    let pred = model.forward(tape, bound, adapt, adapt_bound, &input)?;
    prediction_loss(tape, pred, &example.image, schedule.weight(t))
}

/// Value of the denoising loss for one example.
pub fn denoise_loss<A: Adaptation>(
    model: &Denoiser,
    adapt: &A,
    schedule: &NoiseSchedule,
    example: &TrainingExample,
    t: usize,
    eps: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut ab = adapt.bind(&mut tape)?;
    let loss = denoise_loss_on_tape(&mut tape, model, &bound, adapt, &mut ab, schedule, example, t, eps)?;
    Ok(tape.value(loss).item())
}

/// Uniform example indices, steps in `1..=T` and standard normal noise.
pub fn draw_batch(n_examples: usize, batch: usize, schedule: &NoiseSchedule, rng: &mut RandomSource) -> Vec<NoiseDraw> {
    (0..batch)
        .map(|_| NoiseDraw {
            example: rng.below(n_examples),
            t: 1 + rng.below(schedule.steps()),
            eps: rng.normal_tensor(&[IMAGE_SIZE, IMAGE_SIZE], 1.0),
        })
        .collect()
}

/// Gradients of the trainable members of `params` as a flat list.
pub(crate) fn extract_grads(params: &ParamSet, bound: &BoundParams, grads: &Gradients) -> Vec<Option<Tensor>> {
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.trainable {
                grads.get(bound.var(i)).cloned()
            } else {
                None
            }
        })
        .collect()
}

pub(crate) fn add_grads(params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
    for (p, g) in params.iter_mut().zip(grads) {
        if let (true, Some(g)) = (p.trainable, g) {
            p.grad.add_scaled(g, 1.0)?;
        }
    }
    Ok(())
}

/// Evaluates `per_draw` for every draw in parallel, then sums losses and
/// gradients in draw order so the result does not depend on scheduling.
pub(crate) fn summed_gradients<T, F>(items: &[T], per_draw: F) -> Result<(f64, Vec<Option<Tensor>>)>
where
    T: Sync,
    F: Fn(&T) -> Result<(f64, Vec<Option<Tensor>>)> + Sync + Send,
{
    let results: Vec<Result<(f64, Vec<Option<Tensor>>)>> = items.par_iter().map(per_draw).collect();
    let mut total = 0.0;
    let mut acc: Vec<Option<Tensor>> = Vec::new();
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        if acc.is_empty() {
            acc = grads;
            continue;
        }
        for (a, g) in acc.iter_mut().zip(grads) {
            match (a.as_mut(), g) {
                (Some(a), Some(g)) => a.add_scaled(&g, 1.0)?,
                (None, Some(g)) => *a = Some(g),
                _ => {}
            }
        }
    }
    Ok((total, acc))
}

pub(crate) fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            step,
            message: format!("loss diverged ({loss})"),
        })
    }
}

/// Trains every parameter of `model` on `dataset` with Adam and cosine
/// learning-rate decay.
pub fn train_base(
    model: &mut Denoiser,
    dataset: &[TrainingExample],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut RandomSource,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::config("base training dataset is empty"));
    }
    model.params.set_trainable(true);
    let mut opt = Adam::new(&model.params);
    let mut report = TrainReport::default();
    let inv_batch = 1.0 / config.batch as f64;
    for step in 0..config.steps {
        let draws = draw_batch(dataset.len(), config.batch, schedule, rng);
        let frozen: &Denoiser = model;
        let (loss, grads) = summed_gradients(&draws, |d| {
            let mut tape = Tape::new();
            let bound = frozen.params.bind(&mut tape);
            let l = denoise_loss_on_tape(
                &mut tape,
                frozen,
                &bound,
                &NoAdaptation,
                &mut (),
                schedule,
                &dataset[d.example],
                d.t,
                &d.eps,
            )?;
            let scaled = tape.scale(l, inv_batch);
            let g = tape.backward(scaled)?;
            Ok((tape.value(scaled).item(), extract_grads(&frozen.params, &bound, &g)))
        })?;
        check_finite(loss, step)?;
        add_grads(&mut model.params, &grads)?;
        if config.clip > 0.0 {
            clip_grad_norm(&mut model.params, config.clip);
        }
        opt.step(&mut model.params, cosine_lr(config.lr, step, config.steps))?;
        if !model.params.all_finite() {
            return Err(Error::Training {
                step,
                message: "parameters became non-finite".into(),
            });
        }
        report.losses.push(loss);
        if step % 500 == 0 {
            log::debug!("base step {step}: loss {loss:.5}");
        }
    }
    Ok(report)
}
