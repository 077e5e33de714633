//! Low-rank adapters on the denoiser's attention projections.
//!
//! An adapter replaces a frozen projection `W₀` (shape `m × n`) by
//! `W₀ + scale · U·D` with `U ∈ ℝ^{m×r}` and `D ∈ ℝ^{r×n}`. Tokens are rows,
//! so the adapted layer maps `x` (`tokens × n`) to
//! `x·W₀ᵀ + scale · (x·Dᵀ)·Uᵀ`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::train::{add_grads, check_finite, draw_batch, extract_grads, summed_gradients};
use crate::diffusion::{
    denoise_loss_on_tape, Adaptation, Denoiser, LayerId, NoiseSchedule, TrainConfig, TrainReport, TrainingExample,
};
use crate::error::{Error, Result};
use crate::numerics::{
    clip_grad_norm, cosine_lr, matmul, Adam, Archive, BoundParams, ParamSet, Parameter, RandomSource, Tape, Tensor, Var,
};
use crate::rewards::Aspect;

pub const ADAPTER_MAGIC: &[u8; 8] = b"AMXLORA1";
pub const ADAPTER_EXTENSION: &str = "lora";

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: LayerId,
    /// `m × r`, zero at initialisation.
    pub up: Tensor,
    /// `r × n`.
    pub down: Tensor,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.down.shape()[0]
    }

    /// `(m, n)` of the adapted projection.
    pub fn dims(&self) -> (usize, usize) {
        (self.up.shape()[0], self.down.shape()[1])
    }

    fn validate(&self) -> Result<()> {
        let (m, r) = self.up.dims2()?;
        let (r2, n) = self.down.dims2()?;
        if r != r2 || r == 0 || r > m.min(n) {
            return Err(Error::shape(format!(
                "{}: factors {:?} and {:?} do not form a rank-r update",
                self.target,
                self.up.shape(),
                self.down.shape()
            )));
        }
        Ok(())
    }
}

/// Fresh adapter for an `m × n` projection: `D ~ N(0, 1/r)`, `U = 0`.
pub fn init_adapter(
    target: LayerId,
    dims: (usize, usize),
    rank: usize,
    scale: f64,
    rng: &mut RandomSource,
) -> Result<LoraAdapter> {
    let (m, n) = dims;
    if rank == 0 || rank > m.min(n) {
        return Err(Error::config(format!(
            "{target}: rank {rank} outside 1..={} for a {m}x{n} projection",
            m.min(n)
        )));
    }
    Ok(LoraAdapter {
        target,
        up: Tensor::zeros(&[m, rank]),
        down: rng.normal_tensor(&[rank, n], 1.0 / (rank as f64).sqrt()),
        scale,
    })
}

/// `x·W₀ᵀ + scale · (x·Dᵀ)·Uᵀ` for row tokens `x`.
pub fn adapter_forward(w0: &Tensor, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    if w0.shape() != [adapter.dims().0, adapter.dims().1] {
        return Err(Error::shape(format!(
            "{}: base weight {:?} does not match adapter {:?}",
            adapter.target,
            w0.shape(),
            adapter.dims()
        )));
    }
    let base = matmul(x, &w0.transpose()?)?;
    let low = matmul(x, &adapter.down.transpose()?)?;
    let delta = matmul(&low, &adapter.up.transpose()?)?;
    base.add(&delta.scale(adapter.scale))
}

/// `ΔW = U·D`, shape `m × n`.
pub fn materialize_delta(adapter: &LoraAdapter) -> Result<Tensor> {
    matmul(&adapter.up, &adapter.down)
}

fn up_name(layer: LayerId) -> String {
    format!("{layer}.lora_up")
}

fn down_name(layer: LayerId) -> String {
    format!("{layer}.lora_down")
}

/// One adapter per targeted projection, all trained for a single aspect.
///
/// Factors live in a [`ParamSet`] named `<layer>.lora_up` / `<layer>.lora_down`
/// so they can be optimised and gradient-checked like any other parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub aspect: Aspect,
    layers: Vec<LayerId>,
    scales: Vec<f64>,
    pub params: ParamSet,
}

/// Per-tape handles of an [`AdapterSet`]: `(layer, up, down, scale)`.
pub struct BoundAdapters {
    entries: Vec<(LayerId, Var, Var, f64)>,
}

impl AdapterSet {
    /// Fresh adapters on every attention projection of `model`.
    pub fn init(model: &Denoiser, aspect: Aspect, rank: usize, scale: f64, rng: &mut RandomSource) -> Result<Self> {
        let adapters = model
            .attention_layers()
            .into_iter()
            .map(|layer| {
                let (m, n) = model.layer_weight(layer)?.dims2()?;
                init_adapter(layer, (m, n), rank, scale, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_adapters(aspect, adapters)
    }

    pub fn from_adapters(aspect: Aspect, mut adapters: Vec<LoraAdapter>) -> Result<Self> {
        adapters.sort_by_key(|a| a.target);
        if adapters.windows(2).any(|w| w[0].target == w[1].target) {
            return Err(Error::config(format!("{aspect}: duplicate adapter target")));
        }
        let mut params = ParamSet::new();
        let mut layers = Vec::with_capacity(adapters.len());
        let mut scales = Vec::with_capacity(adapters.len());
        for a in adapters {
            a.validate()?;
            params.insert(Parameter::new(up_name(a.target), a.up, true))?;
            params.insert(Parameter::new(down_name(a.target), a.down, true))?;
            layers.push(a.target);
            scales.push(a.scale);
        }
        Ok(Self {
            aspect,
            layers,
            scales,
            params,
        })
    }

    pub fn layers(&self) -> &[LayerId] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    fn index(&self, layer: LayerId) -> Option<usize> {
        self.layers.binary_search(&layer).ok()
    }

    pub fn adapter(&self, layer: LayerId) -> Option<LoraAdapter> {
        let i = self.index(layer)?;
        Some(LoraAdapter {
            target: layer,
            up: self.params.get(2 * i).value.clone(),
            down: self.params.get(2 * i + 1).value.clone(),
            scale: self.scales[i],
        })
    }

    pub fn adapters(&self) -> Vec<LoraAdapter> {
        self.layers.iter().filter_map(|&l| self.adapter(l)).collect()
    }

    /// `(layer, ΔW, scale)` for every adapter.
    pub fn deltas(&self) -> Result<Vec<(LayerId, Tensor, f64)>> {
        self.adapters()
            .into_iter()
            .map(|a| Ok((a.target, materialize_delta(&a)?, a.scale)))
            .collect()
    }

    /// Writes `<dir>/<layer>.lora` for every adapter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for a in self.adapters() {
            let path = dir.join(format!("{}.{ADAPTER_EXTENSION}", a.target));
            std::fs::write(path, adapter_to_bytes(self.aspect, &a)?)?;
        }
        Ok(())
    }

    /// Reads every `*.lora` file in `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| p.extension().is_some_and(|e| e == ADAPTER_EXTENSION));
        paths.sort();
        if paths.is_empty() {
            return Err(Error::format(dir, "no adapter files"));
        }
        let mut aspect = None;
        let mut adapters = Vec::new();
        for p in paths {
            let (asp, a) = adapter_from_bytes(&std::fs::read(&p)?).map_err(|e| Error::format(&p, e.to_string()))?;
            if aspect.is_some_and(|x| x != asp) {
                return Err(Error::format(&p, "adapters of mixed aspects in one directory"));
            }
            aspect = Some(asp);
            adapters.push(a);
        }
        Self::from_adapters(aspect.expect("non-empty"), adapters)
    }
}

impl Adaptation for AdapterSet {
    type Bound = BoundAdapters;

    fn bind(&self, tape: &mut Tape) -> Result<BoundAdapters> {
        let bound = self.params.bind(tape);
        Ok(self.bound_from(&bound))
    }

    fn project(&self, bound: &mut BoundAdapters, tape: &mut Tape, layer: LayerId, x: Var, w0: Var) -> Result<Var> {
        let base = tape.matmul_t(x, w0)?;
        match bound.entries.iter().find(|e| e.0 == layer) {
            Some(&(_, up, down, scale)) => {
                let low = tape.matmul_t(x, down)?;
                let delta = tape.matmul_t(low, up)?;
                let delta = tape.scale(delta, scale);
                tape.add(base, delta)
            }
            None => Ok(base),
        }
    }
}

impl AdapterSet {
    /// Handles for an already bound copy of [`AdapterSet::params`].
    pub fn bound_from(&self, bound: &BoundParams) -> BoundAdapters {
        BoundAdapters {
            entries: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, &l)| (l, bound.var(2 * i), bound.var(2 * i + 1), self.scales[i]))
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AdapterHeader {
    aspect: Aspect,
    layer: String,
    m: usize,
    n: usize,
    rank: usize,
    scale: f64,
}

pub fn adapter_to_bytes(aspect: Aspect, a: &LoraAdapter) -> Result<Vec<u8>> {
    let (m, n) = a.dims();
    let header = AdapterHeader {
        aspect,
        layer: a.target.to_string(),
        m,
        n,
        rank: a.rank(),
        scale: a.scale,
    };
    let archive = Archive {
        header: toml::to_string(&header).map_err(|e| Error::config(e.to_string()))?,
        entries: vec![("up".into(), a.up.clone()), ("down".into(), a.down.clone())],
    };
    Ok(archive.to_bytes(ADAPTER_MAGIC))
}

pub fn adapter_from_bytes(bytes: &[u8]) -> Result<(Aspect, LoraAdapter)> {
    let archive = Archive::from_bytes(bytes, ADAPTER_MAGIC)?;
    let h: AdapterHeader = toml::from_str(&archive.header).map_err(|e| Error::config(e.to_string()))?;
    let get = |name: &str| {
        archive
            .get(name)
            .cloned()
            .ok_or_else(|| Error::config(format!("adapter file lacks tensor {name:?}")))
    };
    let a = LoraAdapter {
        target: h.layer.parse()?,
        up: get("up")?,
        down: get("down")?,
        scale: h.scale,
    };
    a.validate()?;
    if a.dims() != (h.m, h.n) || a.rank() != h.rank {
        return Err(Error::config("adapter header disagrees with its tensors"));
    }
    Ok((h.aspect, a))
}

/// Trains the adapter factors on `examples` with the denoising objective.
/// The base model is only read; its parameters never receive updates.
pub fn finetune_lora(
    model: &Denoiser,
    adapters: &mut AdapterSet,
    examples: &[TrainingExample],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut RandomSource,
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::Curation(format!("{}: empty training manifest", adapters.aspect)));
    }
    let mut frozen = model.params.clone();
    frozen.set_trainable(false);
    adapters.params.set_trainable(true);
    let mut opt = Adam::new(&adapters.params);
    let mut report = TrainReport::default();
    let inv_batch = 1.0 / config.batch as f64;
    for step in 0..config.steps {
        let draws = draw_batch(examples.len(), config.batch, schedule, rng);
        let current: &AdapterSet = adapters;
        let (loss, grads) = summed_gradients(&draws, |d| {
            let mut tape = Tape::new();
            let base = frozen.bind(&mut tape);
            let bound = current.params.bind(&mut tape);
            let mut handles = current.bound_from(&bound);
            let l = denoise_loss_on_tape(
                &mut tape,
                model,
                &base,
                current,
                &mut handles,
                schedule,
                &examples[d.example],
                d.t,
                &d.eps,
            )?;
            let scaled = tape.scale(l, inv_batch);
            let g = tape.backward(scaled)?;
            Ok((tape.value(scaled).item(), extract_grads(&current.params, &bound, &g)))
        })?;
        check_finite(loss, step)?;
        add_grads(&mut adapters.params, &grads)?;
        if config.clip > 0.0 {
            clip_grad_norm(&mut adapters.params, config.clip);
        }
        opt.step(&mut adapters.params, cosine_lr(config.lr, step, config.steps))?;
        if !adapters.params.all_finite() {
            return Err(Error::Training {
                step,
                message: "adapter parameters became non-finite".into(),
            });
        }
        report.losses.push(loss);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{procedural_dataset, DenoiserConfig, Projection};
    use proptest::prelude::*;

    const Q0: LayerId = LayerId {
        block: 0,
        proj: Projection::Query,
    };

    fn random_adapter(m: usize, n: usize, r: usize, scale: f64, seed: u64) -> LoraAdapter {
        let mut rng = RandomSource::new(seed);
        let mut a = init_adapter(Q0, (m, n), r, scale, &mut rng).unwrap();
        a.up = rng.normal_tensor(&[m, r], 1.0);
        a
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = RandomSource::new(3);
        let w0 = rng.normal_tensor(&[6, 5], 1.0);
        let a = init_adapter(Q0, (6, 5), 2, 0.5, &mut rng).unwrap();
        assert!(a.up.data().iter().all(|&v| v == 0.0));
        let x = rng.normal_tensor(&[4, 5], 1.0);
        let base = matmul(&x, &w0.transpose().unwrap()).unwrap();
        assert_eq!(adapter_forward(&w0, &a, &x).unwrap(), base);
        assert_eq!(materialize_delta(&a).unwrap(), Tensor::zeros(&[6, 5]));
    }

    #[test]
    fn rank_bounds() {
        let mut rng = RandomSource::new(0);
        assert!(init_adapter(Q0, (6, 5), 5, 0.5, &mut rng).is_ok());
        assert!(init_adapter(Q0, (6, 5), 6, 0.5, &mut rng).is_err());
        assert!(init_adapter(Q0, (6, 5), 0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn zero_scale_is_identity() {
        let a = random_adapter(3, 3, 2, 0.0, 9);
        let w0 = RandomSource::new(1).normal_tensor(&[3, 3], 1.0);
        let x = RandomSource::new(2).normal_tensor(&[2, 3], 1.0);
        let base = matmul(&x, &w0.transpose().unwrap()).unwrap();
        assert_eq!(adapter_forward(&w0, &a, &x).unwrap(), base);
    }

    #[test]
    fn two_by_two_hand_example() {
        let a = LoraAdapter {
            target: Q0,
            up: Tensor::from_rows(&[&[1.0], &[0.0]]).unwrap(),
            down: Tensor::from_rows(&[&[0.0, 1.0]]).unwrap(),
            scale: 0.5,
        };
        let x = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let out = adapter_forward(&Tensor::eye(2), &a, &x).unwrap();
        assert_eq!(out.data(), &[2.0, 2.0]);
    }

    proptest! {
        #[test]
        fn factored_matches_dense(seed in any::<u64>(), m in 1usize..9, n in 1usize..9, tokens in 1usize..6, scale in -2.0f64..2.0) {
            let r = 1 + (seed as usize) % m.min(n);
            let a = random_adapter(m, n, r, scale, seed);
            let mut rng = RandomSource::new(seed ^ 0xabc);
            let w0 = rng.normal_tensor(&[m, n], 1.0);
            let x = rng.normal_tensor(&[tokens, n], 1.0);
            let mut dense = w0.clone();
            dense.add_scaled(&materialize_delta(&a).unwrap(), scale).unwrap();
            let want = matmul(&x, &dense.transpose().unwrap()).unwrap();
            let got = adapter_forward(&w0, &a, &x).unwrap();
            prop_assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn adapter_set_routes_only_its_layers() {
        let model = Denoiser::new(DenoiserConfig::tiny(), &mut RandomSource::new(1)).unwrap();
        let mut rng = RandomSource::new(2);
        let (m, n) = model.layer_weight(Q0).unwrap().dims2().unwrap();
        let only_q = AdapterSet::from_adapters(Aspect::Geometry, vec![random_adapter(m, n, 2, 0.5, 4)]).unwrap();
        let x = rng.normal_tensor(&[3, n], 1.0);
        let w0 = model.layer_weight(Q0).unwrap().clone();
        let mut tape = Tape::new();
        let mut b = only_q.bind(&mut tape).unwrap();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w0.clone());
        let q = only_q.project(&mut b, &mut tape, Q0, xv, wv).unwrap();
        let k_layer = LayerId {
            block: 0,
            proj: Projection::Key,
        };
        let k = only_q.project(&mut b, &mut tape, k_layer, xv, wv).unwrap();
        let want_q = adapter_forward(&w0, &only_q.adapter(Q0).unwrap(), &x).unwrap();
        assert!(tape.value(q).max_abs_diff(&want_q) < 1e-12);
        assert_eq!(tape.value(k), &matmul(&x, &w0.transpose().unwrap()).unwrap());
    }

    #[test]
    fn adapter_files_roundtrip() {
        let model = Denoiser::new(DenoiserConfig::tiny(), &mut RandomSource::new(1)).unwrap();
        let mut set = AdapterSet::init(&model, Aspect::LowLevel, 2, 0.5, &mut RandomSource::new(2)).unwrap();
        for p in set.params.iter_mut() {
            p.value = RandomSource::new(p.name.len() as u64).normal_tensor(p.value.shape(), 1.0);
        }
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        let back = AdapterSet::load(dir.path()).unwrap();
        assert_eq!(back, set);
        assert!(AdapterSet::load(&dir.path().join("missing")).is_err());
        let mut bytes = adapter_to_bytes(set.aspect, &set.adapters()[0]).unwrap();
        bytes[0] = b'X';
        assert!(adapter_from_bytes(&bytes).is_err());
    }

    #[test]
    fn finetune_rejects_empty_manifest() {
        let model = Denoiser::new(DenoiserConfig::tiny(), &mut RandomSource::new(1)).unwrap();
        let mut set = AdapterSet::init(&model, Aspect::Aesthetics, 2, 0.5, &mut RandomSource::new(2)).unwrap();
        let s = NoiseSchedule::cosine(10).unwrap();
        let cfg = TrainConfig {
            steps: 1,
            batch: 1,
            lr: 1e-3,
            clip: 0.0,
        };
        let err = finetune_lora(&model, &mut set, &[], &s, &cfg, &mut RandomSource::new(0)).unwrap_err();
        assert!(matches!(err, Error::Curation(_)));
    }

    #[test]
    fn zero_learning_rate_leaves_adapters_and_base_alone() {
        let model = Denoiser::new(DenoiserConfig::tiny(), &mut RandomSource::new(1)).unwrap();
        let before_base = model.to_bytes().unwrap();
        let mut set = AdapterSet::init(&model, Aspect::Aesthetics, 2, 0.5, &mut RandomSource::new(2)).unwrap();
        let before = set.clone();
        let data = procedural_dataset(4, 0.0, &mut RandomSource::new(3));
        let s = NoiseSchedule::cosine(10).unwrap();
        let cfg = TrainConfig {
            steps: 1,
            batch: 2,
            lr: 0.0,
            clip: 0.0,
        };
        finetune_lora(&model, &mut set, &data, &s, &cfg, &mut RandomSource::new(0)).unwrap();
        for (a, b) in set.params.iter().zip(before.params.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(model.to_bytes().unwrap(), before_base);
    }

    #[test]
    fn finetune_reduces_loss_on_small_manifest() {
        let mut rng = RandomSource::new(8);
        let model = Denoiser::new(DenoiserConfig::default(), &mut rng).unwrap();
        let before_base = model.to_bytes().unwrap();
        let mut set = AdapterSet::init(&model, Aspect::Geometry, 4, 0.5, &mut rng).unwrap();
        let data = procedural_dataset(32, 0.0, &mut rng);
        let s = NoiseSchedule::cosine(50).unwrap();
        let cfg = TrainConfig {
            steps: 200,
            batch: 8,
            lr: 1e-2,
            clip: 1.0,
        };
        let rep = finetune_lora(&model, &mut set, &data, &s, &cfg, &mut rng).unwrap();
        assert!(
            rep.last_decile() < rep.first_decile(),
            "{} -> {}",
            rep.first_decile(),
            rep.last_decile()
        );
        assert_eq!(model.to_bytes().unwrap(), before_base);
    }
}
