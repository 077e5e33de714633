use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::curation::PromptSpec;
use crate::diffusion::{sample, Adaptation, Denoiser, NoiseSchedule};
use crate::error::Result;
use crate::numerics::{derive_seed, RandomSource};
use crate::rewards::{Aspect, OracleRegistry};

/// Seed-derivation stage for evaluation sampling streams.
pub const STAGE_EVAL: u64 = 10;

/// Seed of the `j`-th evaluation sample of a prompt. Independent of the
/// variant, so every variant is scored on identical (prompt, seed) pairs.
pub fn eval_seed(master: u64, prompt_id: u64, j: u64) -> u64 {
    derive_seed(master, STAGE_EVAL, prompt_id, j)
}

/// Evaluation protocol shared by every variant.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub prompts: Vec<PromptSpec>,
    pub seeds_per_prompt: usize,
    pub master_seed: u64,
    pub sampler_steps: usize,
}

impl EvalProtocol {
    pub fn pairs(&self) -> Vec<(PromptSpec, u64)> {
        self.prompts
            .iter()
            .flat_map(|p| (0..self.seeds_per_prompt as u64).map(move |j| (*p, eval_seed(self.master_seed, p.id, j))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub variant: String,
    pub means: BTreeMap<Aspect, f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub prompts: usize,
    pub seeds_per_prompt: usize,
}

impl EvalReport {
    pub fn row(&self, variant: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn mean(&self, variant: &str, aspect: Aspect) -> Option<f64> {
        self.row(variant).and_then(|r| r.means.get(&aspect).copied())
    }

    /// Aligned table, one row per variant and one column per aspect.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# mean oracle score over {} held-out prompts x {} seeds",
            self.prompts, self.seeds_per_prompt
        );
        let _ = write!(s, "{:<22}", "variant");
        for a in Aspect::ALL {
            let _ = write!(s, " {:>13}", a.label());
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<22}", r.variant);
            for a in Aspect::ALL {
                let _ = write!(s, " {:>13.6}", r.means.get(&a).copied().unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }

    /// One JSON object per variant.
    pub fn json_lines(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("rows serialise") + "\n")
            .collect()
    }
}

/// Per-aspect mean score of `model` under `adapt` over the protocol.
pub fn evaluate_variant<A: Adaptation + Sync>(
    model: &Denoiser,
    adapt: &A,
    schedule: &NoiseSchedule,
    protocol: &EvalProtocol,
    oracles: &OracleRegistry,
) -> Result<BTreeMap<Aspect, f64>> {
    let pairs = protocol.pairs();
    let scores: Vec<Vec<f64>> = pairs
        .par_iter()
        .map(|(prompt, seed)| {
            let img = sample(
                model,
                adapt,
                schedule,
                &prompt.conditioning(),
                &mut RandomSource::new(*seed),
                protocol.sampler_steps,
            )?
            .quantized();
            Aspect::ALL
                .iter()
                .map(|&a| Ok(oracles.require(a)?.score(&prompt.attrs, &img)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = scores.len().max(1) as f64;
    Ok(Aspect::ALL
        .iter()
        .enumerate()
        .map(|(i, &a)| (a, scores.iter().map(|s| s[i]).sum::<f64>() / n))
        .collect())
}
