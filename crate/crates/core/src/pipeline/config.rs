use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{DenoiserConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::rewards::{Aspect, AspectThreshold, OracleRegistry, ThresholdMode};

/// Environment variable naming the directory that relative output
/// directories are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "ASPECTMIX_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub base: BaseSection,
    pub curation: CurationSection,
    pub thresholds: BTreeMap<Aspect, ThresholdMode>,
    pub lora: LoraSection,
    pub router: RouterSection,
    #[serde(default)]
    pub merge: MergeSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub width: usize,
    pub blocks: usize,
    pub mlp_width: usize,
    /// Diffusion steps `T` of the noise schedule.
    pub schedule_steps: usize,
    /// Denoiser evaluations per generated image.
    pub sampler_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSection {
    pub dataset_size: usize,
    /// Fraction of procedural training scenes rendered with one attribute
    /// that disagrees with their conditioning.
    pub mislabel_rate: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationSection {
    /// Number of training prompts `N`.
    pub prompts: usize,
    /// Candidates per prompt `K`.
    pub samples_per_prompt: usize,
    /// Treat an empty manifest as an error instead of skipping the aspect.
    #[serde(default)]
    pub strict: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    /// Multiplier applied to `U·D`.
    pub scale: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterSection {
    /// Weight of the gate-balancing term in the router objective.
    pub balance_weight: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub clip: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSection {
    /// Per-adapter weights in aspect order; uniform when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// Global merge scale; defaults to the adapter scale.
    #[serde(default)]
    pub scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub prompts: usize,
    pub seeds: usize,
    /// Seeds per eval prompt whose sampling traces feed the gate report.
    pub gate_seeds: usize,
}

/// Annotated default configuration.
pub const DEFAULT_CONFIG: &str = r#"# aspectmix pipeline configuration

seed = 20240917
# Relative paths are resolved against $ASPECTMIX_OUT when it is set.
output_dir = "aspectmix-run"

[model]
width = 32
blocks = 2
mlp_width = 64
schedule_steps = 50
sampler_steps = 20

[base]
dataset_size = 2048
mislabel_rate = 0.1
steps = 3000
batch = 16
lr = 2e-3
clip = 1.0

[curation]
prompts = 256
# eight candidates per prompt
samples_per_prompt = 8
strict = false

# Percentile mode keeps the top p% of the candidate pool. Absolute mode
# keeps scores >= value, e.g.
# aesthetics 4.9, text_faithful 1.0, low_level 0.8.
[thresholds]
aesthetics = { mode = "percentile", value = 15.0 }
text_faithful = { mode = "percentile", value = 15.0 }
geometry = { mode = "percentile", value = 15.0 }
low_level = { mode = "percentile", value = 15.0 }

[lora]
rank = 4
# adapter output multiplier 0.5
scale = 0.5
lr = 3e-3
steps = 500
batch = 16
clip = 1.0

[router]
balance_weight = 0.01
lr = 1e-2
steps = 200
batch = 8
clip = 1.0

[merge]
# weights = [0.25, 0.25, 0.25, 0.25]
# scale = 0.5

[eval]
prompts = 64
# every variant sees the same eight seeds per prompt
seeds = 8
gate_seeds = 2
"#;

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("default config parses")
    }
}

fn parse_override(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text` after applying `section.key=value` overrides; values
    /// are read as TOML literals, falling back to plain strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::config(format!("config: {e}")))?;
        for (key, raw) in overrides {
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts
                .pop()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::config(format!("bad key {key:?}")))?;
            let mut node = &mut table;
            for p in parts {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::config(format!("{key}: {p} is not a section")))?;
            }
            node.insert(last.to_string(), parse_override(raw));
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        let positive = [
            ("model.width", self.model.width),
            ("model.blocks", self.model.blocks),
            ("model.mlp_width", self.model.mlp_width),
            ("model.sampler_steps", self.model.sampler_steps),
            ("base.batch", self.base.batch),
            ("base.dataset_size", self.base.dataset_size),
            ("curation.prompts", self.curation.prompts),
            ("curation.samples_per_prompt", self.curation.samples_per_prompt),
            ("lora.batch", self.lora.batch),
            ("router.batch", self.router.batch),
            ("eval.prompts", self.eval.prompts),
            ("eval.seeds", self.eval.seeds),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.model.schedule_steps < 2 {
            return bad("model.schedule_steps must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.base.mislabel_rate) {
            return bad("base.mislabel_rate must lie in [0, 1]".into());
        }
        if !(self.router.balance_weight >= 0.0 && self.router.balance_weight.is_finite()) {
            return bad(format!(
                "router.balance_weight must be >= 0, got {}",
                self.router.balance_weight
            ));
        }
        for (name, lr) in [
            ("base.lr", self.base.lr),
            ("lora.lr", self.lora.lr),
            ("router.lr", self.router.lr),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if self.lora.rank == 0 || self.lora.rank > self.model.width {
            return bad(format!("lora.rank must lie in 1..={}", self.model.width));
        }
        if self.eval.gate_seeds > self.eval.seeds {
            return bad("eval.gate_seeds cannot exceed eval.seeds".into());
        }
        self.thresholds()?;
        Ok(())
    }

    /// Thresholds for all four aspects, validated against oracle ranges.
    pub fn thresholds(&self) -> Result<Vec<AspectThreshold>> {
        let registry = OracleRegistry::builtin();
        Aspect::ALL
            .iter()
            .map(|&a| {
                let mode = self
                    .thresholds
                    .get(&a)
                    .copied()
                    .ok_or_else(|| Error::config(format!("no threshold configured for {a}")))?;
                AspectThreshold::new(a, mode, registry.require(a)?.range())
            })
            .collect()
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            width: self.model.width,
            blocks: self.model.blocks,
            mlp_width: self.model.mlp_width,
        }
    }

    pub fn base_training(&self) -> TrainConfig {
        TrainConfig {
            steps: self.base.steps,
            batch: self.base.batch,
            lr: self.base.lr,
            clip: self.base.clip,
        }
    }

    pub fn lora_training(&self) -> TrainConfig {
        TrainConfig {
            steps: self.lora.steps,
            batch: self.lora.batch,
            lr: self.lora.lr,
            clip: self.lora.clip,
        }
    }

    /// Output directory, resolved against the `ASPECTMIX_OUT` root if set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}
