//! Combining several single-aspect adapter sets.
//!
//! Two strategies:
//!
//! * [`direct_merge`]: a fixed convex combination folded into the base
//!   weight, `W₀ + s · Σ ωᵢ ΔWᵢ`.
//! * Mixture of LoRA: every adapted projection keeps its frozen deltas and
//!   gains a router `W_g` (`n × L`). Per token `x`, gates are
//!   `g = softmax(x·W_g)` and the output is `x·W₀ᵀ + Σ gᵢ·sᵢ·(x·ΔWᵢᵀ)`.
//!   Only the routers are trained, against the denoising loss plus a
//!   balancing term `−Σᵢ log p̂ᵢ` on the average gate of each layer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    denoise_loss_on_tape, draw_batch, Adaptation, Denoiser, LayerId, NoiseSchedule, TrainingExample,
};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::numerics::{
    clip_grad_norm, cosine_lr, matmul, softmax, Adam, Archive, BoundParams, ParamSet, Parameter, RandomSource, Tape,
    Tensor, Var,
};
use crate::rewards::Aspect;

pub const MOL_MAGIC: &[u8; 8] = b"AMXMOL01";
const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Fixed combination weights for [`direct_merge`].
#[derive(Clone, Debug, PartialEq)]
pub struct MergeSpec {
    weights: Vec<f64>,
    scale: f64,
}

impl MergeSpec {
    pub fn new(weights: Vec<f64>, scale: f64) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.is_empty() || (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::config(format!(
                "merge weights must sum to 1, got {sum} over {}",
                weights.len()
            )));
        }
        Ok(Self { weights, scale })
    }

    /// `ωᵢ = 1/L`.
    pub fn uniform(l: usize, scale: f64) -> Result<Self> {
        if l == 0 {
            return Err(Error::config("merge needs at least one adapter"));
        }
        Self::new(vec![1.0 / l as f64; l], scale)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// `W₀ + scale · Σ ωᵢ ΔWᵢ`.
pub fn direct_merge(w0: &Tensor, deltas: &[Tensor], spec: &MergeSpec) -> Result<Tensor> {
    if deltas.len() != spec.weights.len() {
        return Err(Error::config(format!(
            "{} merge weights for {} adapters",
            spec.weights.len(),
            deltas.len()
        )));
    }
    let mut out = w0.clone();
    for (d, &w) in deltas.iter().zip(&spec.weights) {
        if d.shape() != w0.shape() {
            return Err(Error::shape(format!("delta {:?} vs base {:?}", d.shape(), w0.shape())));
        }
        out.add_scaled(d, spec.scale * w)?;
    }
    Ok(out)
}

/// Copy of `model` with every adapted projection replaced by its direct merge.
pub fn merge_adapter_sets(model: &Denoiser, sets: &[AdapterSet], spec: &MergeSpec) -> Result<Denoiser> {
    let mut merged = model.clone();
    for layer in common_layers(sets)? {
        let deltas = sets
            .iter()
            .map(|s| crate::lora::materialize_delta(&s.adapter(layer).expect("common layer")))
            .collect::<Result<Vec<_>>>()?;
        let w = direct_merge(model.layer_weight(layer)?, &deltas, spec)?;
        let id = merged
            .params
            .id(&layer.to_string())
            .ok_or_else(|| Error::config(format!("no layer {layer}")))?;
        merged.params.get_mut(id).value = w;
    }
    Ok(merged)
}

fn common_layers(sets: &[AdapterSet]) -> Result<Vec<LayerId>> {
    let first = sets.first().ok_or_else(|| Error::config("no adapter sets"))?;
    if sets.iter().any(|s| s.layers() != first.layers()) {
        return Err(Error::config("adapter sets target different layers"));
    }
    Ok(first.layers().to_vec())
}

/// One mixture layer in isolation.
#[derive(Clone, Debug, PartialEq)]
pub struct MoLLayerState {
    pub layer: LayerId,
    /// `m × n`, frozen.
    pub w0: Tensor,
    /// `L` frozen deltas, each `m × n`.
    pub deltas: Vec<Tensor>,
    pub scales: Vec<f64>,
    /// `n × L`, the only trainable tensor.
    pub router: Tensor,
}

impl MoLLayerState {
    /// Layer with a zero router (uniform gates).
    pub fn new(layer: LayerId, w0: Tensor, deltas: Vec<Tensor>, scales: Vec<f64>) -> Result<Self> {
        let (_, n) = w0.dims2()?;
        if deltas.is_empty() || deltas.len() != scales.len() {
            return Err(Error::config(format!(
                "{layer}: {} deltas with {} scales",
                deltas.len(),
                scales.len()
            )));
        }
        if let Some(d) = deltas.iter().find(|d| d.shape() != w0.shape()) {
            return Err(Error::shape(format!(
                "{layer}: delta {:?} vs base {:?}",
                d.shape(),
                w0.shape()
            )));
        }
        let router = Tensor::zeros(&[n, deltas.len()]);
        Ok(Self {
            layer,
            w0,
            deltas,
            scales,
            router,
        })
    }

    pub fn experts(&self) -> usize {
        self.deltas.len()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, n) = x.dims2()?;
        if n != self.w0.shape()[1] {
            return Err(Error::shape(format!(
                "{}: token width {n}, layer expects {}",
                self.layer,
                self.w0.shape()[1]
            )));
        }
        Ok(())
    }

    /// Per-token gate vectors, `tokens × L`.
    pub fn gates(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        softmax(&matmul(x, &self.router)?, 1)
    }
}

/// `x·W₀ᵀ + Σᵢ gᵢ(x)·sᵢ·(x·ΔWᵢᵀ)` with `g(x) = softmax(x·W_g)` per token.
pub fn mol_forward(layer: &MoLLayerState, x: &Tensor) -> Result<Tensor> {
    let gates = layer.gates(x)?;
    let (tokens, l) = gates.dims2()?;
    let mut out = matmul(x, &layer.w0.transpose()?)?;
    let m = out.shape()[1];
    for i in 0..l {
        let y = matmul(x, &layer.deltas[i].transpose()?)?;
        let o = out.data_mut();
        for r in 0..tokens {
            let g = gates.at(r, i) * layer.scales[i];
            for c in 0..m {
                o[r * m + c] += g * y.at(r, c);
            }
        }
    }
    Ok(out)
}

/// Average gate per expert and layer over a set of tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct GateStatistics {
    pub layers: Vec<(LayerId, Vec<f64>)>,
    pub tokens: usize,
}

impl GateStatistics {
    pub fn entropy(probs: &[f64]) -> f64 {
        probs.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum()
    }

    /// Mean over layers of the entropy of each layer's average gate.
    pub fn mean_entropy(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|(_, p)| Self::entropy(p)).sum::<f64>() / self.layers.len() as f64
    }

    /// Largest average coefficient of any expert in any layer.
    pub fn max_coefficient(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(_, p)| p.iter().copied())
            .fold(0.0, f64::max)
    }

    /// Text table, one row per layer and one column per expert.
    pub fn table(&self, title: &str, experts: &[Aspect]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {title}");
        let _ = writeln!(
            s,
            "# average gate over {} tokens (all tokens of all samples)",
            self.tokens
        );
        let _ = write!(s, "{:<16}", "layer");
        for a in experts {
            let _ = write!(s, " {:>13}", a.label());
        }
        let _ = writeln!(s, " {:>9}", "entropy");
        for (layer, p) in &self.layers {
            let _ = write!(s, "{:<16}", layer.to_string());
            for v in p {
                let _ = write!(s, " {v:>13.6}");
            }
            let _ = writeln!(s, " {:>9.6}", Self::entropy(p));
        }
        let _ = writeln!(
            s,
            "mean entropy {:.6}  max coefficient {:.6}",
            self.mean_entropy(),
            self.max_coefficient()
        );
        s
    }
}

/// Statistics of a single layer on a token batch.
pub fn gate_statistics(layer: &MoLLayerState, x: &Tensor) -> Result<GateStatistics> {
    let gates = layer.gates(x)?;
    let (tokens, l) = gates.dims2()?;
    let mut p = vec![0.0; l];
    for r in 0..tokens {
        for (i, pi) in p.iter_mut().enumerate() {
            *pi += gates.at(r, i);
        }
    }
    for pi in &mut p {
        *pi /= tokens as f64;
    }
    Ok(GateStatistics {
        layers: vec![(layer.layer, p)],
        tokens,
    })
}

/// `Σ_layers −Σᵢ log p̂ᵢ`.
pub fn balance_loss(stats: &GateStatistics) -> f64 {
    stats
        .layers
        .iter()
        .map(|(_, p)| -p.iter().map(|v| v.ln()).sum::<f64>())
        .sum()
}

/// `l0 + balance_weight · l1`.
pub fn total_loss(l0: f64, l1: f64, balance_weight: f64) -> f64 {
    l0 + balance_weight * l1
}

/// Denoiser-wide mixture: one router per adapted projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MolModel {
    pub experts: Vec<Aspect>,
    layers: Vec<LayerId>,
    /// `deltas[layer][expert]`.
    deltas: Vec<Vec<Tensor>>,
    scales: Vec<Vec<f64>>,
    /// Routers named `<layer>.router`, in layer order.
    pub params: ParamSet,
}

/// Per-tape state of a [`MolModel`]: router handles, delta constants and
/// the gate matrices recorded by each forward pass.
pub struct MolBound {
    routers: Vec<Var>,
    deltas: Vec<Vec<Var>>,
    gates: Vec<Vec<Var>>,
}

impl MolBound {
    /// Gate matrices recorded for each layer, in layer order.
    pub fn gates(&self) -> &[Vec<Var>] {
        &self.gates
    }
}

impl MolModel {
    /// Mixture of `sets` with zero routers.
    pub fn new(sets: &[AdapterSet]) -> Result<Self> {
        let layers = common_layers(sets)?;
        let mut deltas = Vec::with_capacity(layers.len());
        let mut scales = Vec::with_capacity(layers.len());
        let mut params = ParamSet::new();
        for &layer in &layers {
            let adapters: Vec<_> = sets.iter().map(|s| s.adapter(layer).expect("common layer")).collect();
            let n = adapters[0].dims().1;
            deltas.push(
                adapters
                    .iter()
                    .map(crate::lora::materialize_delta)
                    .collect::<Result<Vec<_>>>()?,
            );
            scales.push(adapters.iter().map(|a| a.scale).collect());
            params.insert(Parameter::new(
                format!("{layer}.router"),
                Tensor::zeros(&[n, sets.len()]),
                true,
            ))?;
        }
        Ok(Self {
            experts: sets.iter().map(|s| s.aspect).collect(),
            layers,
            deltas,
            scales,
            params,
        })
    }

    pub fn layers(&self) -> &[LayerId] {
        &self.layers
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn layer_state(&self, model: &Denoiser, layer: LayerId) -> Result<MoLLayerState> {
        let i = self
            .layers
            .binary_search(&layer)
            .map_err(|_| Error::config(format!("no mixture on {layer}")))?;
        Ok(MoLLayerState {
            layer,
            w0: model.layer_weight(layer)?.clone(),
            deltas: self.deltas[i].clone(),
            scales: self.scales[i].clone(),
            router: self.params.get(i).value.clone(),
        })
    }

    pub fn bound_from(&self, tape: &mut Tape, bound: &BoundParams) -> MolBound {
        MolBound {
            routers: (0..self.layers.len()).map(|i| bound.var(i)).collect(),
            deltas: self
                .deltas
                .iter()
                .map(|ds| ds.iter().map(|d| tape.constant(d.clone())).collect())
                .collect(),
            gates: vec![Vec::new(); self.layers.len()],
        }
    }

    /// Gate statistics from the matrices recorded on `tape`.
    pub fn accumulate_gates(&self, tape: &Tape, bound: &MolBound, sums: &mut GateAccumulator) {
        for (li, gs) in bound.gates.iter().enumerate() {
            for &g in gs {
                let t = tape.value(g);
                let (rows, l) = (t.shape()[0], t.shape()[1]);
                for r in 0..rows {
                    for i in 0..l {
                        sums.sums[li][i] += t.at(r, i);
                    }
                }
                sums.tokens[li] += rows;
            }
        }
    }

    pub fn gate_accumulator(&self) -> GateAccumulator {
        GateAccumulator {
            layers: self.layers.clone(),
            sums: vec![vec![0.0; self.num_experts()]; self.layers.len()],
            tokens: vec![0; self.layers.len()],
        }
    }

    /// Serialises routers plus references to the adapter files they mix.
    /// `adapter_dirs[i]` is where expert `i`'s adapter files live.
    pub fn to_bytes(&self, adapter_dirs: &[PathBuf], balance_weight: f64) -> Result<Vec<u8>> {
        if adapter_dirs.len() != self.num_experts() {
            return Err(Error::config("one adapter directory per expert required"));
        }
        let header = MolHeader {
            experts: self.experts.clone(),
            balance_weight,
            layers: self
                .layers
                .iter()
                .map(|l| MolLayerRecord {
                    layer: l.to_string(),
                    experts: self.num_experts(),
                    adapters: adapter_dirs
                        .iter()
                        .map(|d| {
                            d.join(format!("{l}.{}", crate::lora::ADAPTER_EXTENSION))
                                .display()
                                .to_string()
                        })
                        .collect(),
                })
                .collect(),
        };
        let archive = Archive {
            header: toml::to_string(&header).map_err(|e| Error::config(e.to_string()))?,
            entries: self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        };
        Ok(archive.to_bytes(MOL_MAGIC))
    }

    pub fn save(&self, path: &Path, adapter_dirs: &[PathBuf], balance_weight: f64) -> Result<()> {
        std::fs::write(path, self.to_bytes(adapter_dirs, balance_weight)?)?;
        Ok(())
    }

    /// Loads a checkpoint; adapter references are resolved against `root`.
    pub fn load(path: &Path, root: &Path) -> Result<(Self, f64)> {
        let archive = Archive::load(path, MOL_MAGIC)?;
        let header: MolHeader = toml::from_str(&archive.header).map_err(|e| Error::format(path, e.to_string()))?;
        let first = header
            .layers
            .first()
            .ok_or_else(|| Error::format(path, "mixture has no layers"))?;
        let sets = first
            .adapters
            .iter()
            .map(|f| {
                let file = root.join(f);
                let dir = file
                    .parent()
                    .ok_or_else(|| Error::format(path, "bad adapter reference"))?;
                AdapterSet::load(dir)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mol = Self::new(&sets)?;
        if mol.experts != header.experts {
            return Err(Error::format(path, "expert labels disagree with adapter files"));
        }
        for (name, t) in &archive.entries {
            let id = mol
                .params
                .id(name)
                .ok_or_else(|| Error::format(path, format!("unknown router {name}")))?;
            let p = mol.params.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::format(path, format!("router {name} has shape {:?}", t.shape())));
            }
            p.value = t.clone();
        }
        Ok((mol, header.balance_weight))
    }
}

/// Running sums of gate vectors per layer.
#[derive(Clone, Debug)]
pub struct GateAccumulator {
    layers: Vec<LayerId>,
    sums: Vec<Vec<f64>>,
    tokens: Vec<usize>,
}

impl GateAccumulator {
    /// Adds another accumulator over the same layers.
    pub fn merge(&mut self, other: &GateAccumulator) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.tokens.iter_mut().zip(&other.tokens) {
            *a += b;
        }
    }

    pub fn finish(&self) -> GateStatistics {
        GateStatistics {
            layers: self
                .layers
                .iter()
                .zip(&self.sums)
                .zip(&self.tokens)
                .map(|((&l, s), &n)| (l, s.iter().map(|v| v / n.max(1) as f64).collect()))
                .collect(),
            tokens: self.tokens.first().copied().unwrap_or(0),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MolLayerRecord {
    layer: String,
    experts: usize,
    adapters: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct MolHeader {
    experts: Vec<Aspect>,
    balance_weight: f64,
    layers: Vec<MolLayerRecord>,
}

impl Adaptation for MolModel {
    type Bound = MolBound;

    fn bind(&self, tape: &mut Tape) -> Result<MolBound> {
        let bound = self.params.bind(tape);
        Ok(self.bound_from(tape, &bound))
    }

    fn project(&self, bound: &mut MolBound, tape: &mut Tape, layer: LayerId, x: Var, w0: Var) -> Result<Var> {
        let mut out = tape.matmul_t(x, w0)?;
        let Ok(li) = self.layers.binary_search(&layer) else {
            return Ok(out);
        };
        let logits = tape.matmul(x, bound.routers[li])?;
        let gates = tape.softmax(logits, 1)?;
        bound.gates[li].push(gates);
        for (i, &d) in bound.deltas[li].iter().enumerate() {
            let y = tape.matmul_t(x, d)?;
            let g = tape.column(gates, i)?;
            let y = tape.mul_col(y, g)?;
            let y = tape.scale(y, self.scales[li][i]);
            out = tape.add(out, y)?;
        }
        Ok(out)
    }
}

/// Records `−Σ_layers Σᵢ log p̂ᵢ` where `p̂` averages every gate matrix
/// recorded so far on `bound` (all tokens of all samples).
pub fn balance_loss_on_tape(tape: &mut Tape, bound: &MolBound) -> Result<Var> {
    let mut total: Option<Var> = None;
    for gs in &bound.gates {
        if gs.is_empty() {
            continue;
        }
        let all = tape.concat_rows(gs)?;
        let p = tape.mean_rows(all)?;
        let logp = tape.log(p);
        let s = tape.sum(logp);
        let neg = tape.scale(s, -1.0);
        total = Some(match total {
            Some(t) => tape.add(t, neg)?,
            None => neg,
        });
    }
    total.ok_or_else(|| Error::Contract("no gates recorded before balance loss".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub balance_weight: f64,
    #[serde(default)]
    pub clip: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RouterReport {
    /// `(denoise loss, balance loss)` per step.
    pub losses: Vec<(f64, f64)>,
}

/// One batch of the router objective recorded on a fresh tape. Returns the
/// tape, bound routers, and `(total, l0, l1)` handles.
pub fn router_objective(
    model: &Denoiser,
    mol: &MolModel,
    examples: &[TrainingExample],
    draws: &[crate::diffusion::train::NoiseDraw],
    schedule: &NoiseSchedule,
    balance_weight: f64,
) -> Result<(Tape, BoundParams, [Var; 3])> {
    let mut tape = Tape::new();
    let mut frozen = model.params.clone();
    frozen.set_trainable(false);
    let base = frozen.bind(&mut tape);
    let routers = mol.params.bind(&mut tape);
    let mut mb = mol.bound_from(&mut tape, &routers);
    let mut l0: Option<Var> = None;
    for d in draws {
        let l = denoise_loss_on_tape(
            &mut tape,
            model,
            &base,
            mol,
            &mut mb,
            schedule,
            &examples[d.example],
            d.t,
            &d.eps,
        )?;
        l0 = Some(match l0 {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let l0 = l0.ok_or_else(|| Error::config("router batch is empty"))?;
    let l0 = tape.scale(l0, 1.0 / draws.len() as f64);
    let l1 = balance_loss_on_tape(&mut tape, &mb)?;
    let weighted = tape.scale(l1, balance_weight);
    let total = tape.add(l0, weighted)?;
    Ok((tape, routers, [total, l0, l1]))
}

/// Trains only the routers of `mol`; base weights and deltas are constants.
pub fn train_router(
    model: &Denoiser,
    mol: &mut MolModel,
    examples: &[TrainingExample],
    schedule: &NoiseSchedule,
    config: &RouterConfig,
    rng: &mut RandomSource,
) -> Result<RouterReport> {
    if mol.num_experts() < 2 {
        return Err(Error::config(format!(
            "router training needs at least 2 experts, got {}",
            mol.num_experts()
        )));
    }
    if examples.is_empty() {
        return Err(Error::Curation("router training set is empty".into()));
    }
    if config.balance_weight.is_nan() || config.balance_weight < 0.0 {
        return Err(Error::config(format!(
            "balance weight must be >= 0, got {}",
            config.balance_weight
        )));
    }
    mol.params.set_trainable(true);
    let mut opt = Adam::new(&mol.params);
    let mut report = RouterReport::default();
    for step in 0..config.steps {
        let draws = draw_batch(examples.len(), config.batch, schedule, rng);
        let (tape, routers, [total, l0, l1]) =
            router_objective(model, mol, examples, &draws, schedule, config.balance_weight)?;
        let loss = tape.value(total).item();
        crate::diffusion::train::check_finite(loss, step)?;
        let grads = tape.backward(total)?;
        mol.params.accumulate(&routers, &grads)?;
        if config.clip > 0.0 {
            clip_grad_norm(&mut mol.params, config.clip);
        }
        opt.step(&mut mol.params, cosine_lr(config.lr, step, config.steps))?;
        if !mol.params.all_finite() {
            return Err(Error::Training {
                step,
                message: "router weights became non-finite".into(),
            });
        }
        report.losses.push((tape.value(l0).item(), tape.value(l1).item()));
    }
    Ok(report)
}
