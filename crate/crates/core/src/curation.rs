//! Per-aspect training-set curation.
//!
//! A prompt set is sampled `K` times per prompt, every candidate is scored
//! by every oracle, and for each aspect the candidates passing that
//! aspect's threshold are reduced to one representative per prompt (the
//! highest-scoring survivor).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::diffusion::{
    sample, Adaptation, Denoiser, IntensityBand, NoiseSchedule, Quadrant, SceneAttributes, SceneImage, ShapeClass,
    TrainingExample,
};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, RandomSource};
use crate::rewards::{Aspect, AspectThreshold, OracleRegistry, ThresholdMode};

/// Seed-derivation stage for candidate sampling streams.
pub const STAGE_CANDIDATES: u64 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PromptSpec {
    pub id: u64,
    pub attrs: SceneAttributes,
}

impl PromptSpec {
    pub fn conditioning(&self) -> Vec<f64> {
        self.attrs.conditioning()
    }
}

/// `n` prompts with ids `first_id..first_id + n`. Attributes cycle through
/// shuffled rounds of all 24 combinations, so counts differ by at most one.
pub fn build_prompt_set(n: usize, first_id: u64, rng: &mut RandomSource) -> Vec<PromptSpec> {
    let all = SceneAttributes::all();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut round = all.clone();
        rng.shuffle(&mut round);
        for attrs in round.into_iter().take(n - out.len()) {
            out.push(PromptSpec {
                id: first_id + out.len() as u64,
                attrs,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateRecord {
    pub prompt: PromptSpec,
    pub seed: u64,
    pub image: SceneImage,
    pub scores: BTreeMap<Aspect, f64>,
}

impl CandidateRecord {
    pub fn score(&self, aspect: Aspect) -> Result<f64> {
        self.scores.get(&aspect).copied().ok_or_else(|| {
            Error::Curation(format!(
                "candidate (prompt {}, seed {}) has no {aspect} score",
                self.prompt.id, self.seed
            ))
        })
    }
}

/// Seed of the `k`-th candidate of a prompt.
pub fn candidate_seed(master: u64, prompt_id: u64, k: u64) -> u64 {
    derive_seed(master, STAGE_CANDIDATES, prompt_id, k)
}

/// `k` samples per prompt, each from its own derived stream. Images are
/// quantized to the PGM grid so that stored and in-memory copies agree.
pub fn generate_candidates<A: Adaptation + Sync>(
    model: &Denoiser,
    adapt: &A,
    schedule: &NoiseSchedule,
    prompts: &[PromptSpec],
    k: usize,
    master_seed: u64,
    sampler_steps: usize,
) -> Result<Vec<CandidateRecord>> {
    if k == 0 {
        return Err(Error::config("need at least one sample per prompt"));
    }
    let jobs: Vec<(PromptSpec, u64)> = prompts
        .iter()
        .flat_map(|p| (0..k as u64).map(move |j| (*p, candidate_seed(master_seed, p.id, j))))
        .collect();
    jobs.par_iter()
        .map(|&(prompt, seed)| {
            let image = sample(
                model,
                adapt,
                schedule,
                &prompt.conditioning(),
                &mut RandomSource::new(seed),
                sampler_steps,
            )?
            .quantized();
            Ok(CandidateRecord {
                prompt,
                seed,
                image,
                scores: BTreeMap::new(),
            })
        })
        .collect()
}

/// Fills every record's score for all four aspects (recomputing any
/// existing ones, so the call is idempotent).
pub fn score_candidates(records: &mut [CandidateRecord], oracles: &OracleRegistry) -> Result<()> {
    let oracles: Vec<_> = Aspect::ALL
        .iter()
        .map(|&a| oracles.require(a).map(|o| (a, o)))
        .collect::<Result<_>>()?;
    records.par_iter_mut().for_each(|r| {
        for (a, o) in &oracles {
            r.scores.insert(*a, o.score(&r.prompt.attrs, &r.image));
        }
    });
    Ok(())
}

/// Records passing `threshold`. In percentile mode the cut is the score of
/// the `⌈p·n/100⌉`-th best record and everything tied with it is kept.
pub fn filter_threshold<'a>(
    records: &'a [CandidateRecord],
    threshold: &AspectThreshold,
) -> Result<Vec<&'a CandidateRecord>> {
    let scores = records
        .iter()
        .map(|r| r.score(threshold.aspect))
        .collect::<Result<Vec<_>>>()?;
    let cut = match threshold.mode {
        ThresholdMode::Absolute(t) => t,
        ThresholdMode::Percentile(p) => {
            if records.is_empty() {
                return Ok(Vec::new());
            }
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let keep = ((p / 100.0 * records.len() as f64).ceil() as usize).clamp(1, records.len());
            sorted[keep - 1]
        }
    };
    Ok(records
        .iter()
        .zip(scores)
        .filter(|(_, s)| *s >= cut)
        .map(|(r, _)| r)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub prompt: PromptSpec,
    pub seed: u64,
    pub score: f64,
    /// Content hash of the image in the image store.
    pub image: String,
}

/// Generation metadata stored in a manifest's header line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ManifestMeta {
    pub prompts: usize,
    pub samples_per_prompt: usize,
    pub threshold: String,
    pub master_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingManifest {
    pub aspect: Aspect,
    pub meta: ManifestMeta,
    /// Sorted by prompt id, at most one per prompt.
    pub entries: Vec<ManifestEntry>,
}

/// Highest-scoring survivor per prompt; exact ties go to the lowest seed.
pub fn select_representative(
    survivors: &[&CandidateRecord],
    aspect: Aspect,
    meta: ManifestMeta,
) -> Result<TrainingManifest> {
    let mut best: BTreeMap<u64, (&CandidateRecord, f64)> = BTreeMap::new();
    for &r in survivors {
        let s = r.score(aspect)?;
        match best.get(&r.prompt.id) {
            Some(&(cur, cs)) if cs > s || (cs == s && cur.seed <= r.seed) => {}
            _ => {
                best.insert(r.prompt.id, (r, s));
            }
        }
    }
    let entries = best
        .into_values()
        .map(|(r, score)| ManifestEntry {
            prompt: r.prompt,
            seed: r.seed,
            score,
            image: r.image.content_hash(),
        })
        .collect();
    Ok(TrainingManifest { aspect, meta, entries })
}

/// Directory of PGM images named by content hash.
#[derive(Clone, Debug)]
pub struct ImageStore {
    dir: PathBuf,
}

impl ImageStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.pgm"))
    }

    /// Stores `image` (idempotent) and returns its hash.
    pub fn put(&self, image: &SceneImage) -> Result<String> {
        let hash = image.content_hash();
        let path = self.path(&hash);
        if !path.exists() {
            image.write_pgm(&path)?;
        }
        Ok(hash)
    }

    /// Loads an image and checks that it still matches its name.
    pub fn get(&self, hash: &str) -> Result<SceneImage> {
        let path = self.path(hash);
        let img = SceneImage::read_pgm(&path)?;
        if img.content_hash() != hash {
            return Err(Error::format(&path, "image content does not match its hash"));
        }
        Ok(img)
    }
}

const MANIFEST_TAG: &str = "aspectmix-manifest/1";

impl TrainingManifest {
    /// Header line, a column line, then one tab-separated line per entry:
    /// `prompt_id shape quadrant intensity seed aspect score image`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# {MANIFEST_TAG} aspect={} prompts={} samples_per_prompt={} threshold={} master_seed={} entries={}",
            self.aspect,
            self.meta.prompts,
            self.meta.samples_per_prompt,
            self.meta.threshold,
            self.meta.master_seed,
            self.entries.len()
        );
        let _ = writeln!(s, "# prompt_id\tshape\tquadrant\tintensity\tseed\taspect\tscore\timage");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.prompt.id,
                e.prompt.attrs.shape,
                e.prompt.attrs.quadrant.number(),
                e.prompt.attrs.intensity,
                e.seed,
                self.aspect,
                e.score,
                e.image
            );
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::format(origin, format!("line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(0, "empty manifest"))?;
        let rest = header
            .strip_prefix("# ")
            .and_then(|h| h.strip_prefix(MANIFEST_TAG))
            .ok_or_else(|| bad(0, "missing manifest header"))?;
        let fields: BTreeMap<&str, &str> = rest.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
        let field = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| bad(0, &format!("header lacks {k}")))
        };
        let num = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|_| bad(0, &format!("bad {k}"))) };
        let aspect: Aspect = field("aspect")?.parse()?;
        let meta = ManifestMeta {
            prompts: num("prompts")? as usize,
            samples_per_prompt: num("samples_per_prompt")? as usize,
            threshold: field("threshold")?.to_string(),
            master_seed: num("master_seed")?,
        };
        let expected = num("entries")? as usize;
        let mut entries = Vec::with_capacity(expected);
        for (i, line) in lines {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 8 {
                return Err(bad(i, "expected 8 tab-separated fields"));
            }
            let parse_u = |s: &str| s.parse::<u64>().map_err(|_| bad(i, "bad integer"));
            let q: u8 = cols[2].parse().map_err(|_| bad(i, "bad quadrant"))?;
            let attrs = SceneAttributes {
                shape: cols[1].parse::<ShapeClass>()?,
                quadrant: Quadrant::new(q)?,
                intensity: cols[3].parse::<IntensityBand>()?,
            };
            if cols[5].parse::<Aspect>()? != aspect {
                return Err(bad(i, "entry aspect differs from header"));
            }
            entries.push(ManifestEntry {
                prompt: PromptSpec {
                    id: parse_u(cols[0])?,
                    attrs,
                },
                seed: parse_u(cols[4])?,
                score: cols[6].parse().map_err(|_| bad(i, "bad score"))?,
                image: cols[7].to_string(),
            });
        }
        if entries.len() != expected {
            return Err(Error::format(
                origin,
                format!("header promises {expected} entries, found {}", entries.len()),
            ));
        }
        if entries.windows(2).any(|w| w[0].prompt.id >= w[1].prompt.id) {
            return Err(Error::format(origin, "entries not strictly ordered by prompt id"));
        }
        Ok(Self { aspect, meta, entries })
    }

    /// Training pairs with images read from `store`.
    pub fn examples(&self, store: &ImageStore) -> Result<Vec<TrainingExample>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(TrainingExample {
                    cond: e.prompt.conditioning(),
                    image: store.get(&e.image)?,
                })
            })
            .collect()
    }
}

pub fn persist_manifest(manifest: &TrainingManifest, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, manifest.to_text())?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<TrainingManifest> {
    TrainingManifest::from_text(&std::fs::read_to_string(path)?, path)
}

/// Candidate table: one line per record with all four scores.
pub fn candidates_to_text(records: &[CandidateRecord]) -> String {
    let mut s = String::from("# prompt_id\tseed");
    for a in Aspect::ALL {
        let _ = write!(s, "\t{a}");
    }
    s.push_str("\timage\n");
    for r in records {
        let _ = write!(s, "{}\t{}", r.prompt.id, r.seed);
        for a in Aspect::ALL {
            match r.scores.get(&a) {
                Some(v) => {
                    let _ = write!(s, "\t{v}");
                }
                None => s.push_str("\t-"),
            }
        }
        let _ = writeln!(s, "\t{}", r.image.content_hash());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{render_ideal, DenoiserConfig, NoAdaptation};
    use crate::rewards::aesthetic_oracle;
    use crate::rewards::RewardOracle;

    fn counts(prompts: &[PromptSpec]) -> Vec<usize> {
        let all = SceneAttributes::all();
        all.iter()
            .map(|a| prompts.iter().filter(|p| p.attrs == *a).count())
            .collect()
    }

    #[test]
    fn prompt_sets_cover_combinations_evenly() {
        let mut rng = RandomSource::new(1);
        assert!(counts(&build_prompt_set(24, 0, &mut rng)).iter().all(|&c| c == 1));
        assert!(counts(&build_prompt_set(48, 0, &mut rng)).iter().all(|&c| c == 2));
        let c = counts(&build_prompt_set(25, 0, &mut rng));
        assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
        let p = build_prompt_set(30, 500, &mut rng);
        let ids: Vec<u64> = p.iter().map(|p| p.id).collect();
        assert_eq!(ids, (500..530).collect::<Vec<_>>());
    }

    fn record(prompt_id: u64, seed: u64, score: f64) -> CandidateRecord {
        let attrs = SceneAttributes::all()[prompt_id as usize % 24];
        CandidateRecord {
            prompt: PromptSpec { id: prompt_id, attrs },
            seed,
            image: SceneImage::constant(seed as f64 / 100.0),
            scores: [(Aspect::Geometry, score)].into_iter().collect(),
        }
    }

    fn th(mode: ThresholdMode) -> AspectThreshold {
        AspectThreshold::new(Aspect::Geometry, mode, (0.0, 1.0)).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let recs: Vec<_> = [0.2, 0.5, 0.9, 0.9]
            .iter()
            .enumerate()
            .map(|(i, &s)| record(i as u64, i as u64, s))
            .collect();
        let top = filter_threshold(&recs, &th(ThresholdMode::Percentile(25.0))).unwrap();
        assert_eq!(top.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![2, 3]);
        assert!(filter_threshold(&recs, &th(ThresholdMode::Absolute(0.95)))
            .unwrap()
            .is_empty());
        assert_eq!(
            filter_threshold(&recs, &th(ThresholdMode::Absolute(0.0)))
                .unwrap()
                .len(),
            4
        );
        assert_eq!(
            filter_threshold(&recs, &th(ThresholdMode::Percentile(100.0)))
                .unwrap()
                .len(),
            4
        );
        let unscored = AspectThreshold::new(Aspect::LowLevel, ThresholdMode::Absolute(0.1), (0.0, 1.0)).unwrap();
        assert!(filter_threshold(&recs, &unscored).is_err());
    }

    #[test]
    fn representative_is_argmax_with_lowest_seed_on_ties() {
        let a = record(0, 5, 0.7);
        let b = record(0, 6, 0.9);
        let m = select_representative(&[&a, &b], Aspect::Geometry, ManifestMeta::default()).unwrap();
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].score, 0.9);

        let tied: Vec<_> = [9u64, 3, 7, 4].iter().map(|&s| record(1, s, 0.9)).collect();
        // every ordering of the tied records selects seed 3
        let mut order: Vec<usize> = (0..4).collect();
        for _ in 0..24 {
            let refs: Vec<&CandidateRecord> = order.iter().map(|&i| &tied[i]).collect();
            let m = select_representative(&refs, Aspect::Geometry, ManifestMeta::default()).unwrap();
            assert_eq!(m.entries[0].seed, 3);
            next_permutation(&mut order);
        }
        let empty = select_representative(&[], Aspect::Geometry, ManifestMeta::default()).unwrap();
        assert!(empty.entries.is_empty());
    }

    fn next_permutation(v: &mut [usize]) {
        let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else {
            v.reverse();
            return;
        };
        let j = (i..v.len()).rev().find(|&j| v[j] > v[i - 1]).unwrap();
        v.swap(i - 1, j);
        v[i..].reverse();
    }

    #[test]
    fn candidates_are_deterministic_and_counted() {
        let model = Denoiser::new(DenoiserConfig::tiny(), &mut RandomSource::new(1)).unwrap();
        let s = NoiseSchedule::cosine(10).unwrap();
        let prompts = build_prompt_set(3, 0, &mut RandomSource::new(2));
        let run = || generate_candidates(&model, &NoAdaptation, &s, &prompts, 8, 42, 3).unwrap();
        let a = run();
        assert_eq!(a.len(), 24);
        assert_eq!(a, run());
        let mut pairs: Vec<_> = a.iter().map(|r| (r.prompt.id, r.seed)).collect();
        pairs.sort();
        pairs.dedup();
        assert_eq!(pairs.len(), 24);
        assert_eq!(
            generate_candidates(&model, &NoAdaptation, &s, &prompts, 1, 42, 3)
                .unwrap()
                .len(),
            3
        );
        assert!(generate_candidates(&model, &NoAdaptation, &s, &prompts, 0, 42, 3).is_err());
    }

    #[test]
    fn scoring_is_idempotent_and_complete() {
        let attrs = SceneAttributes::all()[5];
        let mut recs = vec![CandidateRecord {
            prompt: PromptSpec { id: 0, attrs },
            seed: 0,
            image: render_ideal(&attrs),
            scores: BTreeMap::new(),
        }];
        let reg = OracleRegistry::builtin();
        score_candidates(&mut recs, &reg).unwrap();
        let first = recs.clone();
        score_candidates(&mut recs, &reg).unwrap();
        assert_eq!(recs, first);
        assert_eq!(recs[0].scores.len(), 4);
        assert_eq!(
            recs[0].scores[&Aspect::Aesthetics],
            aesthetic_oracle().score(&attrs, &recs[0].image)
        );

        let mut partial = OracleRegistry::default();
        partial.register(Box::new(aesthetic_oracle()));
        assert!(matches!(score_candidates(&mut recs, &partial), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_roundtrip_and_image_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path().join("images")).unwrap();
        let mut recs: Vec<_> = (0..5).map(|i| record(i, i + 10, 0.1 * i as f64 + 1.0 / 3.0)).collect();
        for r in &mut recs {
            r.image = render_ideal(&r.prompt.attrs).quantized();
            store.put(&r.image).unwrap();
        }
        let refs: Vec<&CandidateRecord> = recs.iter().collect();
        let meta = ManifestMeta {
            prompts: 5,
            samples_per_prompt: 1,
            threshold: "geometry:top15%".into(),
            master_seed: 9,
        };
        let m = select_representative(&refs, Aspect::Geometry, meta).unwrap();
        let path = dir.path().join("m/geometry.manifest");
        persist_manifest(&m, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, m);
        let ex = back.examples(&store).unwrap();
        for (e, r) in ex.iter().zip(&recs) {
            assert_eq!(e.image, r.image);
            assert_eq!(e.cond, r.prompt.conditioning());
        }
        let truncated: String = m.to_text().lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(TrainingManifest::from_text(&truncated, &path).is_err());
        assert!(store.get("0000000000000000").is_err());
    }
}
