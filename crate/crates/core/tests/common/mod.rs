//! Finite-difference cases shared by the gradient tests and the acceptance
//! suite. Each case draws a random point from `seed` on the reduced
//! architecture and returns the worst relative error over all trainable
//! scalars.

#![allow(dead_code)]

use aspectmix_core::composition::{router_objective, MolModel};
use aspectmix_core::diffusion::train::NoiseDraw;
use aspectmix_core::diffusion::{
    denoise_loss, denoise_loss_on_tape, procedural_dataset, Denoiser, DenoiserConfig, NoAdaptation, NoiseSchedule,
    TrainingExample,
};
use aspectmix_core::lora::AdapterSet;
use aspectmix_core::numerics::{finite_difference_gradient, max_relative_error, ParamSet, RandomSource, Tape};
use aspectmix_core::rewards::Aspect;
use aspectmix_core::Result;

pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Central-difference step for whole-model losses. At 1e-6 the round-off in
/// a ~1 loss value (a few ulp over 2e-6) swamps elements whose gradient is
/// near 1e-6; 3e-5 keeps both error terms well under the tolerance.
pub const FD_STEP: f64 = 3e-5;
pub const SCHEDULE_STEPS: usize = 20;

struct Point {
    model: Denoiser,
    schedule: NoiseSchedule,
    example: TrainingExample,
    t: usize,
    eps: aspectmix_core::numerics::Tensor,
}

fn point(seed: u64) -> Result<Point> {
    let mut rng = RandomSource::new(seed);
    let model = Denoiser::new(DenoiserConfig::tiny(), &mut rng)?;
    let schedule = NoiseSchedule::cosine(SCHEDULE_STEPS)?;
    let example = procedural_dataset(1, 0.0, &mut rng).remove(0);
    let t = 1 + rng.below(SCHEDULE_STEPS);
    let eps = rng.normal_tensor(&[16, 16], 1.0);
    Ok(Point {
        model,
        schedule,
        example,
        t,
        eps,
    })
}

/// Adapter set with both factors random, so neither factor's gradient
/// vanishes at the check point.
fn random_adapters(model: &Denoiser, aspect: Aspect, rng: &mut RandomSource) -> Result<AdapterSet> {
    let mut set = AdapterSet::init(model, aspect, 2, 0.5, rng)?;
    for p in set.params.iter_mut() {
        p.value = rng.normal_tensor(p.value.shape(), 0.3);
    }
    Ok(set)
}

fn frozen(params: &ParamSet) -> ParamSet {
    let mut p = params.clone();
    p.set_trainable(false);
    p
}

/// Denoising loss with respect to every denoiser parameter.
pub fn denoiser_case(seed: u64) -> Result<f64> {
    let pt = point(seed)?;
    let mut tape = Tape::new();
    let bound = pt.model.params.bind(&mut tape);
    let loss = denoise_loss_on_tape(
        &mut tape,
        &pt.model,
        &bound,
        &NoAdaptation,
        &mut (),
        &pt.schedule,
        &pt.example,
        pt.t,
        &pt.eps,
    )?;
    let mut analytic = pt.model.params.clone();
    analytic.zero_grad();
    analytic.accumulate(&bound, &tape.backward(loss)?)?;

    let numeric = finite_difference_gradient(
        |ps| {
            let m = Denoiser {
                config: pt.model.config.clone(),
                params: ps.clone(),
            };
            denoise_loss(&m, &NoAdaptation, &pt.schedule, &pt.example, pt.t, &pt.eps)
        },
        &pt.model.params,
        FD_STEP,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Denoising loss with respect to the up and down factors of every adapter,
/// base weights frozen.
pub fn lora_case(seed: u64) -> Result<f64> {
    let pt = point(seed)?;
    let mut rng = RandomSource::new(seed ^ 0x5eed);
    let set = random_adapters(&pt.model, Aspect::Aesthetics, &mut rng)?;

    let mut tape = Tape::new();
    let base = frozen(&pt.model.params).bind(&mut tape);
    let ab = set.params.bind(&mut tape);
    let mut handles = set.bound_from(&ab);
    let loss = denoise_loss_on_tape(
        &mut tape,
        &pt.model,
        &base,
        &set,
        &mut handles,
        &pt.schedule,
        &pt.example,
        pt.t,
        &pt.eps,
    )?;
    let mut analytic = set.params.clone();
    analytic.zero_grad();
    analytic.accumulate(&ab, &tape.backward(loss)?)?;

    let numeric = finite_difference_gradient(
        |ps| {
            let mut s = set.clone();
            s.params = ps.clone();
            denoise_loss(&pt.model, &s, &pt.schedule, &pt.example, pt.t, &pt.eps)
        },
        &set.params,
        FD_STEP,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

struct RouterFixture {
    pt: Point,
    mol: MolModel,
    examples: Vec<TrainingExample>,
    draws: Vec<NoiseDraw>,
}

fn router_fixture(seed: u64) -> Result<RouterFixture> {
    let pt = point(seed)?;
    let mut rng = RandomSource::new(seed ^ 0x0a7e);
    let sets = [Aspect::Aesthetics, Aspect::Geometry, Aspect::LowLevel]
        .into_iter()
        .map(|a| random_adapters(&pt.model, a, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut mol = MolModel::new(&sets)?;
    for p in mol.params.iter_mut() {
        p.value = rng.normal_tensor(p.value.shape(), 0.5);
    }
    let examples = procedural_dataset(2, 0.0, &mut rng);
    let draws = (0..2)
        .map(|i| NoiseDraw {
            example: i,
            t: 1 + rng.below(SCHEDULE_STEPS),
            eps: rng.normal_tensor(&[16, 16], 1.0),
        })
        .collect();
    Ok(RouterFixture {
        pt,
        mol,
        examples,
        draws,
    })
}

impl RouterFixture {
    /// Analytic router gradients of output `which` (0 total, 1 denoise,
    /// 2 balance).
    fn analytic(&self, weight: f64, which: usize) -> Result<ParamSet> {
        let (tape, routers, outs) = router_objective(
            &self.pt.model,
            &self.mol,
            &self.examples,
            &self.draws,
            &self.pt.schedule,
            weight,
        )?;
        let mut g = self.mol.params.clone();
        g.zero_grad();
        g.accumulate(&routers, &tape.backward(outs[which])?)?;
        Ok(g)
    }

    fn numeric(&self, weight: f64, which: usize) -> Result<Vec<Option<aspectmix_core::numerics::Tensor>>> {
        finite_difference_gradient(
            |ps| {
                let mut m = self.mol.clone();
                m.params = ps.clone();
                let (tape, _, outs) = router_objective(
                    &self.pt.model,
                    &m,
                    &self.examples,
                    &self.draws,
                    &self.pt.schedule,
                    weight,
                )?;
                Ok(tape.value(outs[which]).item())
            },
            &self.mol.params,
            FD_STEP,
        )
    }
}

pub const ROUTER_BALANCE_WEIGHT: f64 = 0.3;

/// Denoising plus weighted balance loss over a two-sample batch, with
/// respect to every router, at random non-zero router weights.
pub fn router_case(seed: u64) -> Result<f64> {
    let fx = router_fixture(seed)?;
    let analytic = fx.analytic(ROUTER_BALANCE_WEIGHT, 0)?;
    Ok(max_relative_error(&analytic, &fx.numeric(ROUTER_BALANCE_WEIGHT, 0)?))
}

/// Returns the worst absolute gap between the total-loss gradient and
/// `∇l0 + w·∇l1`, and the finite-difference error of `∇l1` alone.
pub fn router_split_case(seed: u64) -> Result<(f64, f64)> {
    let fx = router_fixture(seed)?;
    let w = ROUTER_BALANCE_WEIGHT;
    let total = fx.analytic(w, 0)?;
    let l0 = fx.analytic(w, 1)?;
    let l1 = fx.analytic(w, 2)?;
    let mut gap: f64 = 0.0;
    for ((t, a), b) in total.iter().zip(l0.iter()).zip(l1.iter()) {
        let mut sum = a.grad.clone();
        sum.add_scaled(&b.grad, w)?;
        gap = gap.max(sum.max_abs_diff(&t.grad));
    }
    Ok((gap, max_relative_error(&l1, &fx.numeric(w, 2)?)))
}

/// Overrides shrinking every stage so a full run takes a few seconds.
pub const SMALL_RUN: &[(&str, &str)] = &[
    ("base.dataset_size", "96"),
    ("base.steps", "80"),
    ("base.batch", "4"),
    ("curation.prompts", "12"),
    ("curation.samples_per_prompt", "3"),
    ("model.sampler_steps", "6"),
    ("lora.steps", "15"),
    ("lora.batch", "4"),
    ("router.steps", "8"),
    ("router.batch", "2"),
    ("eval.prompts", "4"),
    ("eval.seeds", "2"),
    ("eval.gate_seeds", "1"),
];

pub fn small_config(extra: &[(&str, &str)]) -> aspectmix_core::pipeline::PipelineConfig {
    let overrides: Vec<(String, String)> = SMALL_RUN
        .iter()
        .chain(extra)
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    aspectmix_core::pipeline::PipelineConfig::from_toml_with_overrides(
        aspectmix_core::pipeline::DEFAULT_CONFIG,
        &overrides,
    )
    .expect("small config")
}

/// Every regular file under `root`, relative path to bytes.
pub fn snapshot(root: &std::path::Path) -> std::collections::BTreeMap<std::path::PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, std::fs::read(&path).expect("readable file"));
            }
        }
    }
    out
}
