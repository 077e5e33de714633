//! Reward oracles, one per quality aspect.
//!
//! Each oracle is a pure function of `(prompt attributes, image)` with a
//! fixed score range. The four built-in oracles are analytic:
//!
//! | aspect          | measures                                   | range  |
//! |-----------------|--------------------------------------------|--------|
//! | `aesthetics`    | figure/background contrast and smoothness  | [1, 5] |
//! | `text_faithful` | fraction of prompted attributes read back  | [0, 1] |
//! | `geometry`      | overlap with the nearest clean template    | [0, 1] |
//! | `low_level`     | absence of high-frequency background noise | [0, 1] |
//!
//! Any other evaluator can be registered through [`RewardOracle`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::scene::IMAGE_SIZE;
use crate::diffusion::{IntensityBand, Quadrant, SceneAttributes, SceneImage, ShapeClass};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    Aesthetics,
    TextFaithful,
    Geometry,
    LowLevel,
}

impl Aspect {
    pub const ALL: [Aspect; 4] = [
        Aspect::Aesthetics,
        Aspect::TextFaithful,
        Aspect::Geometry,
        Aspect::LowLevel,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Aspect::Aesthetics => "aesthetics",
            Aspect::TextFaithful => "text_faithful",
            Aspect::Geometry => "geometry",
            Aspect::LowLevel => "low_level",
        }
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Aspect {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Aspect::ALL
            .into_iter()
            .find(|a| a.label() == s)
            .ok_or_else(|| Error::config(format!("unknown aspect {s:?}")))
    }
}

/// A deterministic scorer for one quality aspect.
pub trait RewardOracle: Send + Sync {
    fn aspect(&self) -> Aspect;

    /// Inclusive `(lo, hi)` score range.
    fn range(&self) -> (f64, f64);

    fn score(&self, prompt: &SceneAttributes, image: &SceneImage) -> f64;
}

/// How a threshold on one aspect is applied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Keep scores `>= θ`.
    Absolute(f64),
    /// Keep the top `p` percent of the candidate pool, `p ∈ (0, 100]`.
    Percentile(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AspectThreshold {
    pub aspect: Aspect,
    pub mode: ThresholdMode,
}

impl AspectThreshold {
    pub fn new(aspect: Aspect, mode: ThresholdMode, range: (f64, f64)) -> Result<Self> {
        match mode {
            ThresholdMode::Percentile(p) if !(p > 0.0 && p <= 100.0) => Err(Error::config(format!(
                "{aspect}: percentile must be in (0, 100], got {p}"
            ))),
            ThresholdMode::Absolute(t) if !(t >= range.0 && t <= range.1) => Err(Error::config(format!(
                "{aspect}: absolute threshold {t} outside oracle range [{}, {}]",
                range.0, range.1
            ))),
            _ => Ok(Self { aspect, mode }),
        }
    }
}

impl fmt::Display for AspectThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            ThresholdMode::Absolute(t) => write!(f, "{}>={}", self.aspect, t),
            ThresholdMode::Percentile(p) => write!(f, "{}:top{}%", self.aspect, p),
        }
    }
}

/// Oracles addressed by aspect.
#[derive(Default)]
pub struct OracleRegistry {
    oracles: BTreeMap<Aspect, Box<dyn RewardOracle>>,
}

impl OracleRegistry {
    /// The four analytic oracles.
    pub fn builtin() -> Self {
        let mut r = Self::default();
        r.register(Box::new(AestheticOracle));
        r.register(Box::new(TextFaithfulOracle));
        r.register(Box::new(GeometryOracle));
        r.register(Box::new(LowLevelOracle));
        r
    }

    pub fn register(&mut self, oracle: Box<dyn RewardOracle>) {
        self.oracles.insert(oracle.aspect(), oracle);
    }

    pub fn get(&self, aspect: Aspect) -> Option<&dyn RewardOracle> {
        self.oracles.get(&aspect).map(|b| b.as_ref())
    }

    pub fn require(&self, aspect: Aspect) -> Result<&dyn RewardOracle> {
        self.get(aspect)
            .ok_or_else(|| Error::config(format!("no oracle registered for {aspect}")))
    }

    pub fn aspects(&self) -> impl Iterator<Item = Aspect> + '_ {
        self.oracles.keys().copied()
    }
}

pub fn aesthetic_oracle() -> AestheticOracle {
    AestheticOracle
}

pub fn text_faithful_oracle() -> TextFaithfulOracle {
    TextFaithfulOracle
}

pub fn geometry_oracle() -> GeometryOracle {
    GeometryOracle
}

pub fn lowlevel_oracle() -> LowLevelOracle {
    LowLevelOracle
}

// ---------------------------------------------------------------------------
// Figure analysis shared by the oracles.

const MIN_FIGURE_CONTRAST: f64 = 0.1;

/// The dominant bright connected region of an image.
#[derive(Clone, Debug)]
pub struct Figure {
    pub background: f64,
    /// Mean intensity inside the region.
    pub level: f64,
    /// Centroid `(row, col)` in continuous pixel coordinates.
    pub centroid: (f64, f64),
    pub mask: Vec<bool>,
}

impl Figure {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn contrast(&self) -> f64 {
        self.level - self.background
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Finds the largest 4-connected region brighter than the midpoint between
/// the median (background) and the maximum pixel. `None` when the image has
/// too little contrast to contain a figure.
pub fn detect_figure(image: &SceneImage) -> Option<Figure> {
    let px = image.pixels().data();
    let background = median(px);
    let peak = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak - background < MIN_FIGURE_CONTRAST {
        return None;
    }
    let cut = 0.5 * (background + peak);
    let bright: Vec<bool> = px.iter().map(|&v| v > cut).collect();

    let n = IMAGE_SIZE;
    let mut label = vec![usize::MAX; n * n];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..n * n {
        if !bright[start] || label[start] != usize::MAX {
            continue;
        }
        let mut comp = vec![start];
        label[start] = start;
        let mut head = 0;
        while head < comp.len() {
            let p = comp[head];
            head += 1;
            let (r, c) = (p / n, p % n);
            let neighbours = [
                (r > 0).then(|| p - n),
                (r + 1 < n).then(|| p + n),
                (c > 0).then(|| p - 1),
                (c + 1 < n).then(|| p + 1),
            ];
            for q in neighbours.into_iter().flatten() {
                if bright[q] && label[q] == usize::MAX {
                    label[q] = start;
                    comp.push(q);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }

    let mut mask = vec![false; n * n];
    let (mut sr, mut sc, mut sv) = (0.0, 0.0, 0.0);
    for &p in &best {
        mask[p] = true;
        sr += (p / n) as f64 + 0.5;
        sc += (p % n) as f64 + 0.5;
        sv += px[p];
    }
    let k = best.len() as f64;
    Some(Figure {
        background,
        level: sv / k,
        centroid: (sr / k, sc / k),
        mask,
    })
}

const TEMPLATE_SIZES: std::ops::RangeInclusive<u32> = 4..=28;
const TEMPLATE_STEP: f64 = 0.25;

fn template(shape: ShapeClass, centroid: (f64, f64), size: f64) -> Vec<bool> {
    let n = IMAGE_SIZE;
    let mut t = vec![false; n * n];
    for r in 0..n {
        for c in 0..n {
            let dy = r as f64 + 0.5 - centroid.0;
            let dx = c as f64 + 0.5 - centroid.1;
            t[r * n + c] = match shape {
                ShapeClass::Disc => dx * dx + dy * dy <= size * size,
                ShapeClass::Square => dx.abs().max(dy.abs()) <= size,
            };
        }
    }
    t
}

/// Best intersection-over-union of the figure mask with an ideal template
/// of class `shape` centred on the figure, over a grid of sizes.
fn best_iou(fig: &Figure, shape: ShapeClass) -> f64 {
    TEMPLATE_SIZES
        .map(|k| {
            let t = template(shape, fig.centroid, k as f64 * TEMPLATE_STEP);
            let inter = t.iter().zip(&fig.mask).filter(|(a, b)| **a && **b).count();
            let union = t.iter().zip(&fig.mask).filter(|(a, b)| **a || **b).count();
            if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            }
        })
        .fold(0.0, f64::max)
}

/// Shape class whose template matches the figure best (disc on ties).
pub fn classify_shape(fig: &Figure) -> ShapeClass {
    if best_iou(fig, ShapeClass::Square) > best_iou(fig, ShapeClass::Disc) {
        ShapeClass::Square
    } else {
        ShapeClass::Disc
    }
}

/// Attributes realised by the image, as read back by template matching.
pub fn read_attributes(image: &SceneImage) -> Option<SceneAttributes> {
    let fig = detect_figure(image)?;
    Some(SceneAttributes {
        shape: classify_shape(&fig),
        quadrant: Quadrant::containing(fig.centroid.0, fig.centroid.1),
        intensity: IntensityBand::classify(fig.level),
    })
}

/// Pixels usable as background for Laplacian statistics: outside the
/// figure dilated by one pixel, with all four neighbours likewise.
fn background_laplacians(image: &SceneImage, fig: Option<&Figure>) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let mut near = vec![false; n * n];
    if let Some(fig) = fig {
        for r in 0..n {
            for c in 0..n {
                if !fig.mask[r * n + c] {
                    continue;
                }
                for dr in -1i32..=1 {
                    for dc in -1i32..=1 {
                        let (rr, cc) = (r as i32 + dr, c as i32 + dc);
                        if (0..n as i32).contains(&rr) && (0..n as i32).contains(&cc) {
                            near[rr as usize * n + cc as usize] = true;
                        }
                    }
                }
            }
        }
    }
    let lap = |r: usize, c: usize| {
        4.0 * image.get(r, c) - image.get(r - 1, c) - image.get(r + 1, c) - image.get(r, c - 1) - image.get(r, c + 1)
    };
    let mut bg = Vec::new();
    let mut all = Vec::new();
    for r in 1..n - 1 {
        for c in 1..n - 1 {
            let l = lap(r, c);
            all.push(l);
            let clear = [(r, c), (r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
                .iter()
                .all(|&(a, b)| !near[a * n + b]);
            if clear {
                bg.push(l);
            }
        }
    }
    if bg.is_empty() {
        all
    } else {
        bg
    }
}

// ---------------------------------------------------------------------------
// Oracles.

/// Global figure contrast weighted by background smoothness, on `[1, 5]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct AestheticOracle;

impl RewardOracle for AestheticOracle {
    fn aspect(&self) -> Aspect {
        Aspect::Aesthetics
    }

    fn range(&self) -> (f64, f64) {
        (1.0, 5.0)
    }

    fn score(&self, _prompt: &SceneAttributes, image: &SceneImage) -> f64 {
        let Some(fig) = detect_figure(image) else {
            return 1.0;
        };
        let contrast = (4.0 * fig.contrast().max(0.0)).tanh();
        let lap = background_laplacians(image, Some(&fig));
        let roughness = lap.iter().map(|v| v.abs()).sum::<f64>() / lap.len() as f64;
        let smoothness = (-roughness / 0.05).exp();
        (1.0 + 4.0 * contrast * (0.5 + 0.5 * smoothness)).clamp(1.0, 5.0)
    }
}

/// Fraction of the prompt's three attributes (shape, quadrant, intensity
/// band) realised in the image.
#[derive(Clone, Copy, Debug, Default)]
pub struct TextFaithfulOracle;

impl RewardOracle for TextFaithfulOracle {
    fn aspect(&self) -> Aspect {
        Aspect::TextFaithful
    }

    fn range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn score(&self, prompt: &SceneAttributes, image: &SceneImage) -> f64 {
        let Some(seen) = read_attributes(image) else {
            return 0.0;
        };
        let hits = [
            seen.shape == prompt.shape,
            seen.quadrant == prompt.quadrant,
            seen.intensity == prompt.intensity,
        ]
        .iter()
        .filter(|&&h| h)
        .count();
        hits as f64 / 3.0
    }
}

/// Agreement between the figure's normalised intensity map and the best
/// fitting ideal disc or square (one minus the normalised L1 mismatch).
#[derive(Clone, Copy, Debug, Default)]
pub struct GeometryOracle;

impl RewardOracle for GeometryOracle {
    fn aspect(&self) -> Aspect {
        Aspect::Geometry
    }

    fn range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn score(&self, _prompt: &SceneAttributes, image: &SceneImage) -> f64 {
        let Some(fig) = detect_figure(image) else {
            return 0.0;
        };
        let span = fig.contrast();
        let soft: Vec<f64> = image
            .pixels()
            .data()
            .iter()
            .map(|&v| ((v - fig.background) / span).clamp(0.0, 1.0))
            .collect();
        let mass: f64 = soft.iter().sum();
        let mut best = 0.0f64;
        for shape in ShapeClass::ALL {
            for k in TEMPLATE_SIZES {
                let t = template(shape, fig.centroid, k as f64 * TEMPLATE_STEP);
                let t_mass = t.iter().filter(|&&b| b).count() as f64;
                let mismatch: f64 = soft
                    .iter()
                    .zip(&t)
                    .map(|(&s, &b)| (s - if b { 1.0 } else { 0.0 }).abs())
                    .sum();
                let denom = mass + t_mass;
                if denom > 0.0 {
                    best = best.max(1.0 - mismatch / denom);
                }
            }
        }
        best.clamp(0.0, 1.0)
    }
}

/// `1 / (1 + σ̂ / 0.05)` where `σ̂` is the pixel-noise level implied by the
/// RMS Laplacian on the background.
#[derive(Clone, Copy, Debug, Default)]
pub struct LowLevelOracle;

/// RMS of the 5-point Laplacian of unit white noise.
const LAPLACIAN_NOISE_GAIN: f64 = 4.47213595499958; // sqrt(20)

impl RewardOracle for LowLevelOracle {
    fn aspect(&self) -> Aspect {
        Aspect::LowLevel
    }

    fn range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn score(&self, _prompt: &SceneAttributes, image: &SceneImage) -> f64 {
        let fig = detect_figure(image);
        let lap = background_laplacians(image, fig.as_ref());
        let rms = (lap.iter().map(|v| v * v).sum::<f64>() / lap.len() as f64).sqrt();
        let sigma = rms / LAPLACIAN_NOISE_GAIN;
        1.0 / (1.0 + sigma / 0.05)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{render_ideal, FigureSpec};
    use crate::numerics::RandomSource;

    fn attrs(shape: ShapeClass, q: u8, band: IntensityBand) -> SceneAttributes {
        SceneAttributes {
            shape,
            quadrant: Quadrant::new(q).unwrap(),
            intensity: band,
        }
    }

    fn with_noise(img: &SceneImage, sigma: f64, seed: u64) -> SceneImage {
        let mut rng = RandomSource::new(seed);
        let noise = rng.normal_tensor(&[16, 16], sigma);
        SceneImage::new(img.pixels().add(&noise).unwrap()).unwrap().clamped()
    }

    #[test]
    fn ideal_scenes_read_back_their_attributes() {
        for a in SceneAttributes::all() {
            assert_eq!(read_attributes(&render_ideal(&a)), Some(a), "{a:?}");
        }
    }

    #[test]
    fn aesthetic_examples() {
        let o = aesthetic_oracle();
        assert_eq!(o.score(&SceneAttributes::all()[0], &SceneImage::constant(0.3)), 1.0);
        let a = attrs(ShapeClass::Disc, 1, IntensityBand::High);
        let s = o.score(&a, &render_ideal(&a));
        assert!(s >= 4.5, "{s}");
        let img = render_ideal(&a);
        let mean = img.pixels().mean();
        let crushed = SceneImage::new(img.pixels().map(|v| mean + 0.5 * (v - mean))).unwrap();
        assert!(o.score(&a, &crushed) < s);
    }

    #[test]
    fn text_faithful_examples() {
        let o = text_faithful_oracle();
        let a = attrs(ShapeClass::Square, 2, IntensityBand::Mid);
        assert_eq!(o.score(&a, &render_ideal(&a)), 1.0);
        let all_wrong = attrs(ShapeClass::Disc, 3, IntensityBand::High);
        assert_eq!(o.score(&a, &render_ideal(&all_wrong)), 0.0);
        assert_eq!(o.score(&a, &SceneImage::constant(0.2)), 0.0);
    }

    #[test]
    fn one_wrong_attribute_scores_two_thirds() {
        let o = text_faithful_oracle();
        for a in SceneAttributes::all() {
            let variants = [
                SceneAttributes {
                    shape: a.shape.other(),
                    ..a
                },
                SceneAttributes {
                    quadrant: a.quadrant.opposite(),
                    ..a
                },
                SceneAttributes {
                    intensity: a.intensity.next(),
                    ..a
                },
            ];
            for v in variants {
                let s = o.score(&a, &render_ideal(&v));
                assert!((s - 2.0 / 3.0).abs() < 1e-15, "{a:?} vs {v:?}: {s}");
            }
        }
    }

    #[test]
    fn geometry_examples() {
        let o = geometry_oracle();
        let a = attrs(ShapeClass::Square, 4, IntensityBand::High);
        let ideal = render_ideal(&a);
        let s = o.score(&a, &ideal);
        assert!(s >= 0.95, "{s}");
        assert_eq!(o.score(&a, &SceneImage::constant(0.0)), 0.0);

        // jitter only boundary pixels of the square
        let mut rng = RandomSource::new(77);
        let mut px = ideal.pixels().clone();
        let spec = FigureSpec::ideal(&a);
        for r in 0..16 {
            for c in 0..16 {
                let inside = spec.covers(r, c);
                let edge = (r > 0 && spec.covers(r - 1, c) != inside)
                    || (r < 15 && spec.covers(r + 1, c) != inside)
                    || (c > 0 && spec.covers(r, c - 1) != inside)
                    || (c < 15 && spec.covers(r, c + 1) != inside);
                if edge {
                    px.data_mut()[r * 16 + c] = rng.uniform_range(0.1, 0.9);
                }
            }
        }
        let jittered = SceneImage::new(px).unwrap();
        assert!(o.score(&a, &jittered) < s);
    }

    #[test]
    fn lowlevel_examples() {
        let o = lowlevel_oracle();
        let a = attrs(ShapeClass::Disc, 2, IntensityBand::Mid);
        let clean = render_ideal(&a);
        let s = o.score(&a, &clean);
        assert!(s >= 0.9, "{s}");
        assert!(o.score(&a, &with_noise(&clean, 0.2, 5)) < s);
    }

    #[test]
    fn oracles_are_deterministic_and_in_range() {
        let reg = OracleRegistry::builtin();
        let mut rng = RandomSource::new(12);
        for a in SceneAttributes::all() {
            let img = crate::diffusion::render_varied(&a, &mut rng);
            for aspect in Aspect::ALL {
                let o = reg.require(aspect).unwrap();
                let (lo, hi) = o.range();
                let s1 = o.score(&a, &img);
                let s2 = o.score(&a, &img);
                assert_eq!(s1.to_bits(), s2.to_bits());
                assert!((lo..=hi).contains(&s1), "{aspect}: {s1}");
            }
        }
    }

    #[test]
    fn attribute_swap_leaves_lowlevel_alone() {
        let tf = text_faithful_oracle();
        let ll = lowlevel_oracle();
        for a in SceneAttributes::all() {
            let swapped = SceneAttributes {
                shape: a.shape.other(),
                quadrant: a.quadrant.opposite(),
                ..a
            };
            let ideal = render_ideal(&a);
            let other = render_ideal(&swapped);
            assert!(tf.score(&a, &other) < tf.score(&a, &ideal));
            assert!((ll.score(&a, &other) - ll.score(&a, &ideal)).abs() < 0.05);
        }
    }

    #[test]
    fn thresholds_validate() {
        let r = (0.0, 1.0);
        assert!(AspectThreshold::new(Aspect::Geometry, ThresholdMode::Percentile(15.0), r).is_ok());
        assert!(AspectThreshold::new(Aspect::Geometry, ThresholdMode::Percentile(0.0), r).is_err());
        assert!(AspectThreshold::new(Aspect::Geometry, ThresholdMode::Percentile(100.5), r).is_err());
        assert!(AspectThreshold::new(Aspect::Aesthetics, ThresholdMode::Absolute(4.9), (1.0, 5.0)).is_ok());
        assert!(AspectThreshold::new(Aspect::LowLevel, ThresholdMode::Absolute(1.2), r).is_err());
    }

    #[test]
    fn aspect_labels_roundtrip() {
        for a in Aspect::ALL {
            assert_eq!(a.label().parse::<Aspect>().unwrap(), a);
        }
        assert!("colour".parse::<Aspect>().is_err());
    }
}
