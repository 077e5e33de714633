//! Two-stage orchestration over an output directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! run.log                      seeds, thresholds and per-stage summaries
//! base.ckpt                    base denoiser
//! images/<hash>.pgm            every generated candidate
//! candidates.tsv               candidate scores
//! manifests/<aspect>.manifest  curated training sets
//! adapters/<aspect>/*.lora     per-aspect adapters
//! mol.ckpt                     routers trained with the configured balance weight
//! mol_balance0.ckpt            routers trained without the balancing term
//! merged.ckpt                  direct-merge denoiser
//! reports/eval.{txt,jsonl}     held-out scores per variant
//! reports/gates.{txt,jsonl}    average gate coefficients per layer
//! ```

pub mod config;
pub mod eval;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::composition::{
    merge_adapter_sets, train_router, GateAccumulator, GateStatistics, MergeSpec, MolModel, RouterConfig, RouterReport,
};
use crate::curation::{
    build_prompt_set, candidates_to_text, filter_threshold, generate_candidates, load_manifest, persist_manifest,
    score_candidates, select_representative, CandidateRecord, ImageStore, ManifestMeta, PromptSpec, TrainingManifest,
};
use crate::diffusion::{
    procedural_dataset, sample_observed, train_base, Denoiser, NoAdaptation, NoiseSchedule, TrainReport,
    TrainingExample,
};
use crate::error::{Error, Result};
use crate::lora::{finetune_lora, AdapterSet};
use crate::numerics::{derive_seed, RandomSource};
use crate::rewards::{Aspect, OracleRegistry};

pub use config::{PipelineConfig, DEFAULT_CONFIG, OUTPUT_ROOT_ENV};
pub use eval::{eval_seed, evaluate_variant, EvalProtocol, EvalReport, EvalRow};

/// Seed-derivation stages. Every stream is
/// `derive_seed(master, stage, a, b)` with `(a, b)` naming the item.
pub mod stage {
    pub const BASE_INIT: u64 = 1;
    pub const BASE_DATA: u64 = 2;
    pub const BASE_TRAIN: u64 = 3;
    pub const TRAIN_PROMPTS: u64 = 4;
    pub const EVAL_PROMPTS: u64 = 5;
    pub const CANDIDATES: u64 = crate::curation::STAGE_CANDIDATES;
    pub const LORA_INIT: u64 = 7;
    pub const LORA_TRAIN: u64 = 8;
    pub const ROUTER_TRAIN: u64 = 9;
    pub const EVAL: u64 = super::eval::STAGE_EVAL;
}

/// Evaluation prompt ids start here, far above any training prompt id.
pub const EVAL_PROMPT_ID_BASE: u64 = 1 << 32;

pub const VARIANT_BASE: &str = "base";
pub const VARIANT_MERGE: &str = "merge";
pub const VARIANT_MOL: &str = "mol";
pub const VARIANT_MOL_BALANCE0: &str = "mol_balance0";

pub fn lora_variant(aspect: Aspect) -> String {
    format!("lora/{aspect}")
}

/// Outcome of curation.
#[derive(Clone, Debug)]
pub struct CurationOutcome {
    pub prompts: Vec<PromptSpec>,
    pub candidates: Vec<CandidateRecord>,
    /// One per aspect, including empty ones.
    pub manifests: Vec<TrainingManifest>,
}

/// Outcome of router training.
#[derive(Clone, Debug)]
pub struct StageTwo {
    pub mol: MolModel,
    pub mol_report: RouterReport,
    /// Same seed, balance weight 0. Absent when the configured weight is 0.
    pub ablation: Option<(MolModel, RouterReport)>,
    pub merged: Denoiser,
    pub training_examples: usize,
}

#[derive(Clone, Debug)]
pub struct GateReport {
    pub configured: GateStatistics,
    pub ablation: Option<GateStatistics>,
    pub experts: Vec<Aspect>,
    pub text: String,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    out: PathBuf,
    oracles: OracleRegistry,
}

impl Pipeline {
    /// Pipeline writing to the configured (environment-resolved) directory.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        let out = config.resolved_output_dir();
        Self::at(config, out)
    }

    pub fn at(config: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out = out.into();
        std::fs::create_dir_all(&out)
            .map_err(|e| Error::config(format!("output directory {} is not writable: {e}", out.display())))?;
        Ok(Self {
            config,
            out,
            oracles: OracleRegistry::builtin(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn oracles(&self) -> &OracleRegistry {
        &self.oracles
    }

    pub fn base_path(&self) -> PathBuf {
        self.out.join("base.ckpt")
    }

    pub fn manifest_path(&self, aspect: Aspect) -> PathBuf {
        self.out.join("manifests").join(format!("{aspect}.manifest"))
    }

    /// Adapter directory relative to the output directory.
    pub fn adapter_rel_dir(aspect: Aspect) -> PathBuf {
        PathBuf::from("adapters").join(aspect.label())
    }

    pub fn adapter_dir(&self, aspect: Aspect) -> PathBuf {
        self.out.join(Self::adapter_rel_dir(aspect))
    }

    pub fn mol_path(&self) -> PathBuf {
        self.out.join("mol.ckpt")
    }

    pub fn mol_ablation_path(&self) -> PathBuf {
        self.out.join("mol_balance0.ckpt")
    }

    pub fn merged_path(&self) -> PathBuf {
        self.out.join("merged.ckpt")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    pub fn image_store(&self) -> Result<ImageStore> {
        ImageStore::open(self.out.join("images"))
    }

    fn seed(&self, stage: u64, a: u64, b: u64) -> u64 {
        derive_seed(self.config.seed, stage, a, b)
    }

    /// Appends a line to `run.log`.
    fn log(&self, line: &str) -> Result<()> {
        log::info!("{line}");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.out.join("run.log"))?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.config.model.schedule_steps)
    }

    pub fn train_base(&self) -> Result<(Denoiser, TrainReport)> {
        let cfg = &self.config;
        let seeds = [
            self.seed(stage::BASE_INIT, 0, 0),
            self.seed(stage::BASE_DATA, 0, 0),
            self.seed(stage::BASE_TRAIN, 0, 0),
        ];
        self.log(&format!(
            "train-base master_seed={} init_seed={} data_seed={} train_seed={} dataset={} steps={} lr={}",
            cfg.seed, seeds[0], seeds[1], seeds[2], cfg.base.dataset_size, cfg.base.steps, cfg.base.lr
        ))?;
        let mut model = Denoiser::new(cfg.denoiser(), &mut RandomSource::new(seeds[0]))?;
        let data = procedural_dataset(
            cfg.base.dataset_size,
            cfg.base.mislabel_rate,
            &mut RandomSource::new(seeds[1]),
        );
        let report = train_base(
            &mut model,
            &data,
            &self.schedule()?,
            &cfg.base_training(),
            &mut RandomSource::new(seeds[2]),
        )?;
        model.save(&self.base_path())?;
        self.log(&format!(
            "train-base done loss_first_decile={:.6} loss_last_decile={:.6}",
            report.first_decile(),
            report.last_decile()
        ))?;
        Ok((model, report))
    }

    pub fn load_base(&self) -> Result<Denoiser> {
        let path = self.base_path();
        if !path.exists() {
            return Err(Error::config(format!(
                "no base checkpoint at {}; run train-base first",
                path.display()
            )));
        }
        Denoiser::load(&path)
    }

    pub fn training_prompts(&self) -> Vec<PromptSpec> {
        let mut rng = RandomSource::new(self.seed(stage::TRAIN_PROMPTS, 0, 0));
        build_prompt_set(self.config.curation.prompts, 0, &mut rng)
    }

    pub fn eval_protocol(&self) -> EvalProtocol {
        self.eval_protocol_with_seeds(self.config.eval.seeds)
    }

    fn eval_protocol_with_seeds(&self, seeds: usize) -> EvalProtocol {
        let mut rng = RandomSource::new(self.seed(stage::EVAL_PROMPTS, 0, 0));
        EvalProtocol {
            prompts: build_prompt_set(self.config.eval.prompts, EVAL_PROMPT_ID_BASE, &mut rng),
            seeds_per_prompt: seeds,
            master_seed: self.config.seed,
            sampler_steps: self.config.model.sampler_steps,
        }
    }

    /// Generates, scores and filters candidates, then writes one manifest
    /// per aspect. Empty manifests are skipped with a warning, or rejected
    /// in strict mode.
    pub fn curate(&self) -> Result<CurationOutcome> {
        let cfg = &self.config;
        let model = self.load_base()?;
        let prompts = self.training_prompts();
        let thresholds = cfg.thresholds()?;
        self.log(&format!(
            "curate prompts={} samples_per_prompt={} candidate_stage={} thresholds={}",
            prompts.len(),
            cfg.curation.samples_per_prompt,
            stage::CANDIDATES,
            thresholds.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
        ))?;
        let mut candidates = generate_candidates(
            &model,
            &NoAdaptation,
            &self.schedule()?,
            &prompts,
            cfg.curation.samples_per_prompt,
            cfg.seed,
            cfg.model.sampler_steps,
        )?;
        score_candidates(&mut candidates, &self.oracles)?;
        let store = self.image_store()?;
        for r in &candidates {
            store.put(&r.image)?;
        }
        std::fs::write(self.out.join("candidates.tsv"), candidates_to_text(&candidates))?;

        let mut manifests = Vec::with_capacity(thresholds.len());
        for th in &thresholds {
            let survivors = filter_threshold(&candidates, th)?;
            let meta = ManifestMeta {
                prompts: prompts.len(),
                samples_per_prompt: cfg.curation.samples_per_prompt,
                threshold: th.to_string(),
                master_seed: cfg.seed,
            };
            let manifest = select_representative(&survivors, th.aspect, meta)?;
            persist_manifest(&manifest, &self.manifest_path(th.aspect))?;
            self.log(&format!(
                "curate aspect={} survivors={} entries={}",
                th.aspect,
                survivors.len(),
                manifest.entries.len()
            ))?;
            if manifest.entries.is_empty() {
                if cfg.curation.strict {
                    return Err(Error::Curation(format!("{} manifest is empty", th.aspect)));
                }
                log::warn!("{} manifest is empty; the aspect will be skipped", th.aspect);
            }
            manifests.push(manifest);
        }
        Ok(CurationOutcome {
            prompts,
            candidates,
            manifests,
        })
    }

    /// Manifests on disk, in aspect order, skipping absent ones.
    pub fn load_manifests(&self) -> Result<Vec<TrainingManifest>> {
        let mut out = Vec::new();
        for a in Aspect::ALL {
            let p = self.manifest_path(a);
            if p.exists() {
                out.push(load_manifest(&p)?);
            }
        }
        Ok(out)
    }

    /// Trains one adapter set per non-empty manifest.
    pub fn finetune(&self) -> Result<Vec<AdapterSet>> {
        let cfg = &self.config;
        let model = self.load_base()?;
        let base_bytes = std::fs::read(self.base_path())?;
        let schedule = self.schedule()?;
        let store = self.image_store()?;
        let manifests = self.load_manifests()?;
        if manifests.is_empty() {
            return Err(Error::config("no manifests found; run curate first"));
        }
        let mut sets = Vec::new();
        for m in manifests {
            let idx = Aspect::ALL.iter().position(|&a| a == m.aspect).expect("known aspect") as u64;
            if m.entries.is_empty() {
                if cfg.curation.strict {
                    return Err(Error::Curation(format!("{} manifest is empty", m.aspect)));
                }
                log::warn!("skipping {}: empty manifest", m.aspect);
                continue;
            }
            let examples = m.examples(&store)?;
            let (init_seed, train_seed) = (
                self.seed(stage::LORA_INIT, idx, 0),
                self.seed(stage::LORA_TRAIN, idx, 0),
            );
            let mut set = AdapterSet::init(
                &model,
                m.aspect,
                cfg.lora.rank,
                cfg.lora.scale,
                &mut RandomSource::new(init_seed),
            )?;
            let report = finetune_lora(
                &model,
                &mut set,
                &examples,
                &schedule,
                &cfg.lora_training(),
                &mut RandomSource::new(train_seed),
            )?;
            set.save(&self.adapter_dir(m.aspect))?;
            self.log(&format!(
                "finetune aspect={} examples={} init_seed={init_seed} train_seed={train_seed} rank={} scale={} lr={} steps={} loss_first_decile={:.6} loss_last_decile={:.6}",
                m.aspect,
                examples.len(),
                cfg.lora.rank,
                cfg.lora.scale,
                cfg.lora.lr,
                cfg.lora.steps,
                report.first_decile(),
                report.last_decile()
            ))?;
            sets.push(set);
        }
        if std::fs::read(self.base_path())? != base_bytes {
            return Err(Error::Contract("base checkpoint changed during fine-tuning".into()));
        }
        Ok(sets)
    }

    pub fn run_stage_one(&self) -> Result<(CurationOutcome, Vec<AdapterSet>)> {
        let outcome = self.curate()?;
        let sets = self.finetune()?;
        Ok((outcome, sets))
    }

    /// Adapter sets on disk, in aspect order.
    pub fn load_adapter_sets(&self) -> Result<Vec<AdapterSet>> {
        let mut sets = Vec::new();
        for a in Aspect::ALL {
            let dir = self.adapter_dir(a);
            if dir.is_dir() {
                sets.push(AdapterSet::load(&dir)?);
            }
        }
        Ok(sets)
    }

    fn merge_spec(&self, experts: usize) -> Result<MergeSpec> {
        let scale = self.config.merge.scale.unwrap_or(self.config.lora.scale);
        match &self.config.merge.weights {
            Some(w) if w.len() != experts => Err(Error::config(format!(
                "merge.weights has {} entries for {experts} adapter sets",
                w.len()
            ))),
            Some(w) => MergeSpec::new(w.clone(), scale),
            None => MergeSpec::uniform(experts, scale),
        }
    }

    /// Writes the direct-merge checkpoint.
    pub fn merge(&self) -> Result<Denoiser> {
        let model = self.load_base()?;
        let sets = self.load_adapter_sets()?;
        if sets.is_empty() {
            return Err(Error::config("no adapter sets found; run finetune first"));
        }
        let spec = self.merge_spec(sets.len())?;
        let merged = merge_adapter_sets(&model, &sets, &spec)?;
        merged.save(&self.merged_path())?;
        self.log(&format!(
            "merge experts={} weights={:?} scale={}",
            sets.iter().map(|s| s.aspect.label()).collect::<Vec<_>>().join(","),
            spec.weights(),
            spec.scale()
        ))?;
        Ok(merged)
    }

    /// Union of the manifests of `aspects`, deduplicated by image hash.
    fn router_examples(&self, aspects: &[Aspect]) -> Result<Vec<TrainingExample>> {
        let store = self.image_store()?;
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for &a in aspects {
            let m = load_manifest(&self.manifest_path(a))?;
            for e in &m.entries {
                if seen.insert(e.image.clone()) {
                    out.push(TrainingExample {
                        cond: e.prompt.conditioning(),
                        image: store.get(&e.image)?,
                    });
                }
            }
        }
        Ok(out)
    }

    fn train_mixture(
        &self,
        model: &Denoiser,
        sets: &[AdapterSet],
        examples: &[TrainingExample],
        balance_weight: f64,
    ) -> Result<(MolModel, RouterReport)> {
        let cfg = &self.config.router;
        let mut mol = MolModel::new(sets)?;
        let rc = RouterConfig {
            steps: cfg.steps,
            batch: cfg.batch,
            lr: cfg.lr,
            balance_weight,
            clip: cfg.clip,
        };
        let report = train_router(
            model,
            &mut mol,
            examples,
            &self.schedule()?,
            &rc,
            &mut RandomSource::new(self.seed(stage::ROUTER_TRAIN, 0, 0)),
        )?;
        Ok((mol, report))
    }

    /// Trains the routers (configured balance weight and the zero-weight
    /// ablation) and writes the direct-merge baseline.
    pub fn compose(&self) -> Result<StageTwo> {
        let cfg = &self.config;
        let model = self.load_base()?;
        let sets = self.load_adapter_sets()?;
        if sets.len() < 2 {
            return Err(Error::config(format!(
                "composition needs at least 2 adapter sets, found {}",
                sets.len()
            )));
        }
        let aspects: Vec<Aspect> = sets.iter().map(|s| s.aspect).collect();
        let examples = self.router_examples(&aspects)?;
        let dirs: Vec<PathBuf> = aspects.iter().map(|&a| Self::adapter_rel_dir(a)).collect();
        let guarded = self.frozen_fingerprint(&aspects)?;

        let (mol, mol_report) = self.train_mixture(&model, &sets, &examples, cfg.router.balance_weight)?;
        mol.save(&self.mol_path(), &dirs, cfg.router.balance_weight)?;
        self.log(&format!(
            "compose experts={} examples={} balance_weight={} lr={} steps={} seed={} {}",
            aspects.iter().map(|a| a.label()).collect::<Vec<_>>().join(","),
            examples.len(),
            cfg.router.balance_weight,
            cfg.router.lr,
            cfg.router.steps,
            self.seed(stage::ROUTER_TRAIN, 0, 0),
            loss_summary(&mol_report)
        ))?;
        let ablation = if cfg.router.balance_weight > 0.0 {
            let (abl, abl_report) = self.train_mixture(&model, &sets, &examples, 0.0)?;
            abl.save(&self.mol_ablation_path(), &dirs, 0.0)?;
            self.log(&format!(
                "compose ablation balance_weight=0 {}",
                loss_summary(&abl_report)
            ))?;
            Some((abl, abl_report))
        } else {
            None
        };
        if self.frozen_fingerprint(&aspects)? != guarded {
            return Err(Error::Contract("router training modified a frozen checkpoint".into()));
        }
        let merged = self.merge()?;
        Ok(StageTwo {
            mol,
            mol_report,
            ablation,
            merged,
            training_examples: examples.len(),
        })
    }

    /// Bytes of the base checkpoint and every adapter file of `aspects`.
    fn frozen_fingerprint(&self, aspects: &[Aspect]) -> Result<Vec<Vec<u8>>> {
        let mut out = vec![std::fs::read(self.base_path())?];
        for &a in aspects {
            let mut files: Vec<PathBuf> = std::fs::read_dir(self.adapter_dir(a))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.sort();
            for f in files {
                out.push(std::fs::read(f)?);
            }
        }
        Ok(out)
    }

    pub fn run_stage_two(&self) -> Result<(StageTwo, GateReport)> {
        let two = self.compose()?;
        let gates = self.report_gates()?;
        Ok((two, gates))
    }

    pub fn load_mol(&self, path: &Path) -> Result<MolModel> {
        if !path.exists() {
            return Err(Error::config(format!(
                "no mixture checkpoint at {}; run compose first",
                path.display()
            )));
        }
        Ok(MolModel::load(path, &self.out)?.0)
    }

    /// Average gates of `mol` along the sampling trajectories of the eval
    /// prompts (first `eval.gate_seeds` seeds of each).
    pub fn gate_statistics(&self, model: &Denoiser, mol: &MolModel) -> Result<GateStatistics> {
        let protocol = self.eval_protocol_with_seeds(self.config.eval.gate_seeds.max(1));
        let schedule = self.schedule()?;
        let parts: Vec<GateAccumulator> = protocol
            .pairs()
            .par_iter()
            .map(|(prompt, seed)| {
                let mut acc = mol.gate_accumulator();
                sample_observed(
                    model,
                    mol,
                    &schedule,
                    &prompt.conditioning(),
                    &mut RandomSource::new(*seed),
                    protocol.sampler_steps,
                    |tape, bound| mol.accumulate_gates(tape, bound, &mut acc),
                )?;
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        let mut total = mol.gate_accumulator();
        for p in &parts {
            total.merge(p);
        }
        Ok(total.finish())
    }

    /// Gate tables for the configured and (when present) ablation mixtures.
    pub fn report_gates(&self) -> Result<GateReport> {
        let model = self.load_base()?;
        let mol = self.load_mol(&self.mol_path())?;
        let configured = self.gate_statistics(&model, &mol)?;
        let ablation = if self.mol_ablation_path().exists() {
            let abl = self.load_mol(&self.mol_ablation_path())?;
            Some(self.gate_statistics(&model, &abl)?)
        } else {
            None
        };
        let w = self.config.router.balance_weight;
        let mut text = configured.table(&format!("balance_weight = {w}"), &mol.experts);
        let mut jsonl = gate_json(VARIANT_MOL, w, &configured, &mol.experts);
        if let Some(a) = &ablation {
            text.push('\n');
            text.push_str(&a.table("balance_weight = 0", &mol.experts));
            jsonl.push_str(&gate_json(VARIANT_MOL_BALANCE0, 0.0, a, &mol.experts));
        }
        let dir = self.reports_dir();
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("gates.txt"), &text)?;
        std::fs::write(dir.join("gates.jsonl"), &jsonl)?;
        self.log(&format!(
            "report mean_entropy={:.6} max_coefficient={:.6}{}",
            configured.mean_entropy(),
            configured.max_coefficient(),
            ablation
                .as_ref()
                .map(|a| format!(
                    " ablation_mean_entropy={:.6} ablation_max_coefficient={:.6}",
                    a.mean_entropy(),
                    a.max_coefficient()
                ))
                .unwrap_or_default()
        ))?;
        Ok(GateReport {
            configured,
            ablation,
            experts: mol.experts,
            text,
        })
    }

    /// Scores every available variant on the held-out protocol.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let model = self.load_base()?;
        let schedule = self.schedule()?;
        let protocol = self.eval_protocol();
        for m in self.load_manifests()? {
            if let Some(e) = m.entries.iter().find(|e| e.prompt.id >= EVAL_PROMPT_ID_BASE) {
                return Err(Error::Contract(format!(
                    "eval prompt {} appears in the {} manifest",
                    e.prompt.id, m.aspect
                )));
            }
        }
        let mut report = EvalReport {
            rows: Vec::new(),
            prompts: protocol.prompts.len(),
            seeds_per_prompt: protocol.seeds_per_prompt,
        };
        let mut push = |variant: String, means| {
            report.rows.push(EvalRow { variant, means });
        };
        push(
            VARIANT_BASE.into(),
            evaluate_variant(&model, &NoAdaptation, &schedule, &protocol, &self.oracles)?,
        );
        for set in self.load_adapter_sets()? {
            push(
                lora_variant(set.aspect),
                evaluate_variant(&model, &set, &schedule, &protocol, &self.oracles)?,
            );
        }
        if self.merged_path().exists() {
            let merged = Denoiser::load(&self.merged_path())?;
            push(
                VARIANT_MERGE.into(),
                evaluate_variant(&merged, &NoAdaptation, &schedule, &protocol, &self.oracles)?,
            );
        }
        for (name, path) in [
            (VARIANT_MOL, self.mol_path()),
            (VARIANT_MOL_BALANCE0, self.mol_ablation_path()),
        ] {
            if path.exists() {
                let mol = self.load_mol(&path)?;
                push(
                    name.into(),
                    evaluate_variant(&model, &mol, &schedule, &protocol, &self.oracles)?,
                );
            }
        }
        let dir = self.reports_dir();
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("eval.txt"), report.table())?;
        std::fs::write(dir.join("eval.jsonl"), report.json_lines())?;
        self.log(&format!(
            "eval prompts={} seeds={} variants={}",
            report.prompts,
            report.seeds_per_prompt,
            report.rows.len()
        ))?;
        Ok(report)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<(EvalReport, GateReport)> {
        self.train_base()?;
        self.run_stage_one()?;
        let (_, gates) = self.run_stage_two()?;
        let report = self.evaluate()?;
        Ok((report, gates))
    }
}

fn loss_summary(r: &RouterReport) -> String {
    let n = r.losses.len();
    if n == 0 {
        return "no_steps".into();
    }
    let k = (n / 10).max(1);
    let mean = |s: &[(f64, f64)]| {
        let (a, b) = s.iter().fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
        (a / s.len() as f64, b / s.len() as f64)
    };
    let (f0, f1) = mean(&r.losses[..k]);
    let (l0, l1) = mean(&r.losses[n - k..]);
    format!("denoise_first={f0:.6} denoise_last={l0:.6} balance_first={f1:.6} balance_last={l1:.6}")
}

fn gate_json(variant: &str, balance_weight: f64, stats: &GateStatistics, experts: &[Aspect]) -> String {
    let mut s = String::new();
    for (layer, p) in &stats.layers {
        let gates: serde_json::Map<String, serde_json::Value> = experts
            .iter()
            .zip(p)
            .map(|(a, v)| (a.label().to_string(), serde_json::json!(v)))
            .collect();
        let rec = serde_json::json!({
            "variant": variant,
            "balance_weight": balance_weight,
            "layer": layer.to_string(),
            "tokens": stats.tokens,
            "gates": gates,
            "entropy": GateStatistics::entropy(p),
        });
        s.push_str(&rec.to_string());
        s.push('\n');
    }
    s
}
