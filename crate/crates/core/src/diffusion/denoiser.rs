//! Tiny token transformer predicting the clean image from a noised one.
//!
//! Tokens: 16 patch embeddings, one condition token, one timestep token.
//! Each block is pre-norm single-head self-attention followed by a tanh
//! MLP, both residual. The output head reads the patch tokens back into
//! pixel space.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Archive, BoundParams, ParamSet, Parameter, RandomSource, Tape, Tensor, Var};

use super::scene::{patchify, COND_DIM, NUM_PATCHES, PATCH_DIM};

pub const TIME_FEATURES: usize = 8;
const LN_EPS: f64 = 1e-5;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AMXDNS01";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub width: usize,
    pub blocks: usize,
    pub mlp_width: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 32,
            blocks: 2,
            mlp_width: 64,
        }
    }
}

impl DenoiserConfig {
    /// Reduced architecture used for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            width: 8,
            blocks: 1,
            mlp_width: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
    ];

    fn tag(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        }
    }
}

/// One attention projection of one block, the unit adapters attach to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    pub block: usize,
    pub proj: Projection,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.attn.{}", self.block, self.proj.tag())
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("bad layer id {s:?}"));
        let rest = s.strip_prefix("blocks.").ok_or_else(bad)?;
        let (block, tag) = rest.split_once(".attn.").ok_or_else(bad)?;
        let block = block.parse().map_err(|_| bad())?;
        let proj = Projection::ALL.into_iter().find(|p| p.tag() == tag).ok_or_else(bad)?;
        Ok(Self { block, proj })
    }
}

/// Hook deciding how an attention projection `x · Wᵀ` is computed, so that
/// adapters can be attached without touching the denoiser itself.
pub trait Adaptation {
    /// Per-tape state (bound parameters, recorded gates, ...).
    type Bound;

    fn bind(&self, tape: &mut Tape) -> Result<Self::Bound>;

    /// Output of `layer` for row tokens `x` given its frozen base weight
    /// `w0` (shape `m × n`).
    fn project(&self, bound: &mut Self::Bound, tape: &mut Tape, layer: LayerId, x: Var, w0: Var) -> Result<Var>;
}

/// The unadapted projection `x · W₀ᵀ`.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoAdaptation;

impl Adaptation for NoAdaptation {
    type Bound = ();

    fn bind(&self, _tape: &mut Tape) -> Result<()> {
        Ok(())
    }

    fn project(&self, _: &mut (), tape: &mut Tape, _: LayerId, x: Var, w0: Var) -> Result<Var> {
        tape.matmul_t(x, w0)
    }
}

/// Inputs for one denoiser evaluation.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserInput<'a> {
    /// Noised image, `[16, 16]`.
    pub noisy: &'a Tensor,
    pub cond: &'a [f64],
    /// Diffusion time as a fraction of the schedule length.
    pub t_frac: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamSet,
}

fn time_features(t_frac: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(TIME_FEATURES);
    for freq in [0.5, 1.0, 2.0, 4.0] {
        v.push((PI * freq * t_frac).sin());
        v.push((PI * freq * t_frac).cos());
    }
    v
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut RandomSource) -> Result<Self> {
        let d = config.width;
        let h = config.mlp_width;
        let mut ps = ParamSet::new();
        let mut add = |name: String, shape: &[usize], std: f64| -> Result<()> {
            let value = if std == 0.0 {
                Tensor::zeros(shape)
            } else {
                rng.normal_tensor(shape, std)
            };
            ps.insert(Parameter::new(name, value, true)).map(|_| ())
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        add("patch_embed.weight".into(), &[d, PATCH_DIM], fan(PATCH_DIM))?;
        add("patch_embed.bias".into(), &[d], 0.0)?;
        add("pos_embed".into(), &[NUM_PATCHES, d], 0.3)?;
        add("cond_embed.weight".into(), &[d, COND_DIM], 1.0)?;
        add("cond_embed.bias".into(), &[d], 0.0)?;
        add("time_embed.weight".into(), &[d, TIME_FEATURES], fan(TIME_FEATURES))?;
        add("time_embed.bias".into(), &[d], 0.0)?;
        for b in 0..config.blocks {
            for p in Projection::ALL {
                let std = if p == Projection::Output { 0.5 * fan(d) } else { fan(d) };
                add(LayerId { block: b, proj: p }.to_string(), &[d, d], std)?;
            }
            add(format!("blocks.{b}.mlp.fc1.weight"), &[h, d], fan(d))?;
            add(format!("blocks.{b}.mlp.fc1.bias"), &[h], 0.0)?;
            add(format!("blocks.{b}.mlp.fc2.weight"), &[d, h], 0.5 * fan(h))?;
            add(format!("blocks.{b}.mlp.fc2.bias"), &[d], 0.0)?;
        }
        add("head.weight".into(), &[PATCH_DIM, d], fan(d))?;
        add("head.bias".into(), &[PATCH_DIM], 0.0)?;
        Ok(Self { config, params: ps })
    }

    /// Ids of every attention projection weight, in block/projection order.
    pub fn attention_layers(&self) -> Vec<LayerId> {
        (0..self.config.blocks)
            .flat_map(|block| Projection::ALL.into_iter().map(move |proj| LayerId { block, proj }))
            .collect()
    }

    pub fn layer_weight(&self, layer: LayerId) -> Result<&Tensor> {
        self.params
            .by_name(&layer.to_string())
            .map(|p| &p.value)
            .ok_or_else(|| Error::config(format!("no layer {layer}")))
    }

    fn pid(&self, name: &str) -> usize {
        self.params
            .id(name)
            .unwrap_or_else(|| panic!("denoiser parameter {name} missing"))
    }

    fn linear(&self, tape: &mut Tape, bound: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
        let w = bound.var(self.pid(&format!("{prefix}.weight")));
        let b = bound.var(self.pid(&format!("{prefix}.bias")));
        let y = tape.matmul_t(x, w)?;
        tape.add_row(y, b)
    }

    /// Records the forward pass and returns the predicted clean image in
    /// patch layout, `[16 patches, 16 values]`.
    pub fn forward<A: Adaptation>(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        adapt: &A,
        adapt_bound: &mut A::Bound,
        input: &DenoiserInput<'_>,
    ) -> Result<Var> {
        if input.cond.len() != COND_DIM {
            return Err(Error::shape(format!(
                "conditioning has {} values, expected {COND_DIM}",
                input.cond.len()
            )));
        }
        let d = self.config.width;
        let patches = tape.constant(patchify(input.noisy));
        let x = self.linear(tape, bound, patches, "patch_embed")?;
        let pos = bound.var(self.pid("pos_embed"));
        let x = tape.add(x, pos)?;

        let cond = tape.constant(Tensor::new(vec![1, COND_DIM], input.cond.to_vec())?);
        let cond_tok = self.linear(tape, bound, cond, "cond_embed")?;
        let tf = tape.constant(Tensor::new(vec![1, TIME_FEATURES], time_features(input.t_frac))?);
        let time_tok = self.linear(tape, bound, tf, "time_embed")?;

        let mut h = tape.concat_rows(&[x, cond_tok, time_tok])?;
        let attn_scale = 1.0 / (d as f64).sqrt();
        for b in 0..self.config.blocks {
            let a = tape.layer_norm(h, LN_EPS)?;
            let mut proj = |tape: &mut Tape, p: Projection, x: Var| -> Result<Var> {
                let layer = LayerId { block: b, proj: p };
                let w0 = bound.var(self.pid(&layer.to_string()));
                adapt.project(adapt_bound, tape, layer, x, w0)
            };
            let q = proj(tape, Projection::Query, a)?;
            let k = proj(tape, Projection::Key, a)?;
            let v = proj(tape, Projection::Value, a)?;
            let scores = tape.matmul_t(q, k)?;
            let scores = tape.scale(scores, attn_scale);
            let attn = tape.softmax(scores, 1)?;
            let mixed = tape.matmul(attn, v)?;
            let o = proj(tape, Projection::Output, mixed)?;
            h = tape.add(h, o)?;

            let m = tape.layer_norm(h, LN_EPS)?;
            let m = self.linear(tape, bound, m, &format!("blocks.{b}.mlp.fc1"))?;
            let m = tape.tanh(m);
            let m = self.linear(tape, bound, m, &format!("blocks.{b}.mlp.fc2"))?;
            h = tape.add(h, m)?;
        }
        let tokens = tape.slice_rows(h, 0, NUM_PATCHES)?;
        let tokens = tape.layer_norm(tokens, LN_EPS)?;
        self.linear(tape, bound, tokens, "head")
    }

    /// Forward pass without gradients; returns the prediction in patch
    /// layout.
    pub fn predict<A: Adaptation>(&self, adapt: &A, input: &DenoiserInput<'_>) -> Result<Tensor> {
        self.predict_observed(adapt, input, |_, _| {})
    }

    /// [`Denoiser::predict`], handing the finished tape and adaptation state
    /// to `observe` (used to read recorded router gates).
    pub fn predict_observed<A, F>(&self, adapt: &A, input: &DenoiserInput<'_>, mut observe: F) -> Result<Tensor>
    where
        A: Adaptation,
        F: FnMut(&Tape, &A::Bound),
    {
        let mut tape = Tape::new();
        let mut frozen = self.params.clone();
        frozen.set_trainable(false);
        let bound = frozen.bind(&mut tape);
        let mut ab = adapt.bind(&mut tape)?;
        let out = self.forward(&mut tape, &bound, adapt, &mut ab, input)?;
        observe(&tape, &ab);
        Ok(tape.value(out).clone())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let header = toml::to_string(&self.config).map_err(|e| Error::config(e.to_string()))?;
        Ok(Archive {
            header,
            entries: self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_archive()?.to_bytes(CHECKPOINT_MAGIC))
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let config: DenoiserConfig = toml::from_str(&archive.header).map_err(|e| Error::config(e.to_string()))?;
        let mut model = Self::new(config, &mut RandomSource::new(0))?;
        if archive.entries.len() != model.params.len() {
            return Err(Error::format(
                "<checkpoint>",
                format!(
                    "expected {} tensors, found {}",
                    model.params.len(),
                    archive.entries.len()
                ),
            ));
        }
        for (name, t) in &archive.entries {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::format("<checkpoint>", format!("unknown tensor {name}")))?;
            let p = model.params.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::format(
                    "<checkpoint>",
                    format!("tensor {name}: shape {:?} != {:?}", t.shape(), p.value.shape()),
                ));
            }
            p.value = t.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path, CHECKPOINT_MAGIC)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_ids_roundtrip() {
        for block in 0..3 {
            for proj in Projection::ALL {
                let id = LayerId { block, proj };
                assert_eq!(id.to_string().parse::<LayerId>().unwrap(), id);
            }
        }
        assert!("blocks.x.attn.q".parse::<LayerId>().is_err());
        assert!("blocks.0.mlp.q".parse::<LayerId>().is_err());
    }

    #[test]
    fn output_has_image_shape() {
        let model = Denoiser::new(DenoiserConfig::default(), &mut RandomSource::new(1)).unwrap();
        let noisy = RandomSource::new(2).normal_tensor(&[16, 16], 1.0);
        let cond = crate::diffusion::SceneAttributes::all()[3].conditioning();
        let out = model
            .predict(
                &NoAdaptation,
                &DenoiserInput {
                    noisy: &noisy,
                    cond: &cond,
                    t_frac: 0.5,
                },
            )
            .unwrap();
        assert_eq!(out.shape(), &[NUM_PATCHES, PATCH_DIM]);
        assert!(out.is_finite());
        assert_eq!(model.attention_layers().len(), 8);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = Denoiser::new(DenoiserConfig::tiny(), &mut RandomSource::new(5)).unwrap();
        let bytes = model.to_bytes().unwrap();
        let back = Denoiser::from_archive(&Archive::from_bytes(&bytes, CHECKPOINT_MAGIC).unwrap()).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.config, model.config);
    }
}
