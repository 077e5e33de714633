//! Procedural 16×16 grayscale scenes: one bright disc or square on a darker
//! background, described by three discrete attributes.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{RandomSource, Tensor};

pub const IMAGE_SIZE: usize = 16;
pub const PATCH: usize = 4;
pub const PATCHES_PER_SIDE: usize = IMAGE_SIZE / PATCH;
pub const NUM_PATCHES: usize = PATCHES_PER_SIDE * PATCHES_PER_SIDE;
pub const PATCH_DIM: usize = PATCH * PATCH;

/// Width of [`SceneAttributes::conditioning`].
pub const COND_DIM: usize = 2 + 4 + 3;

pub const IDEAL_SIZE: f64 = 3.0;
pub const IDEAL_BACKGROUND: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeClass {
    Disc,
    Square,
}

/// Quadrant of the frame: 1 top-left, 2 top-right, 3 bottom-left,
/// 4 bottom-right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Quadrant(u8);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IntensityBand {
    Low,
    Mid,
    High,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 2] = [ShapeClass::Disc, ShapeClass::Square];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn other(self) -> Self {
        match self {
            ShapeClass::Disc => ShapeClass::Square,
            ShapeClass::Square => ShapeClass::Disc,
        }
    }
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant(1), Quadrant(2), Quadrant(3), Quadrant(4)];

    pub fn new(q: u8) -> Result<Self> {
        if (1..=4).contains(&q) {
            Ok(Self(q))
        } else {
            Err(Error::config(format!("quadrant must be 1..=4, got {q}")))
        }
    }

    pub fn number(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        (self.0 - 1) as usize
    }

    /// Centre `(row, col)` in continuous pixel coordinates.
    pub fn center(self) -> (f64, f64) {
        let half = IMAGE_SIZE as f64 / 4.0;
        let row = if self.0 <= 2 { half } else { 3.0 * half };
        let col = if self.0 % 2 == 1 { half } else { 3.0 * half };
        (row, col)
    }

    /// Quadrant containing the point `(row, col)`.
    pub fn containing(row: f64, col: f64) -> Self {
        let mid = IMAGE_SIZE as f64 / 2.0;
        let top = row < mid;
        let left = col < mid;
        match (top, left) {
            (true, true) => Quadrant(1),
            (true, false) => Quadrant(2),
            (false, true) => Quadrant(3),
            (false, false) => Quadrant(4),
        }
    }

    /// The diagonally opposite quadrant.
    pub fn opposite(self) -> Self {
        Quadrant(5 - self.0)
    }
}

impl IntensityBand {
    pub const ALL: [IntensityBand; 3] = [IntensityBand::Low, IntensityBand::Mid, IntensityBand::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn nominal(self) -> f64 {
        match self {
            IntensityBand::Low => 0.4,
            IntensityBand::Mid => 0.65,
            IntensityBand::High => 0.9,
        }
    }

    /// Band whose nominal level is closest to `level`.
    pub fn classify(level: f64) -> Self {
        if level < 0.525 {
            IntensityBand::Low
        } else if level < 0.775 {
            IntensityBand::Mid
        } else {
            IntensityBand::High
        }
    }

    /// A different band, cycling Low → Mid → High → Low.
    pub fn next(self) -> Self {
        match self {
            IntensityBand::Low => IntensityBand::Mid,
            IntensityBand::Mid => IntensityBand::High,
            IntensityBand::High => IntensityBand::Low,
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeClass::Disc => "disc",
            ShapeClass::Square => "square",
        })
    }
}

impl FromStr for ShapeClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disc" => Ok(ShapeClass::Disc),
            "square" => Ok(ShapeClass::Square),
            _ => Err(Error::config(format!("unknown shape class {s:?}"))),
        }
    }
}

impl fmt::Display for IntensityBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntensityBand::Low => "low",
            IntensityBand::Mid => "mid",
            IntensityBand::High => "high",
        })
    }
}

impl FromStr for IntensityBand {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(IntensityBand::Low),
            "mid" => Ok(IntensityBand::Mid),
            "high" => Ok(IntensityBand::High),
            _ => Err(Error::config(format!("unknown intensity band {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SceneAttributes {
    pub shape: ShapeClass,
    pub quadrant: Quadrant,
    pub intensity: IntensityBand,
}

impl SceneAttributes {
    /// All 24 attribute combinations in a fixed order.
    pub fn all() -> Vec<SceneAttributes> {
        let mut out = Vec::with_capacity(24);
        for shape in ShapeClass::ALL {
            for quadrant in Quadrant::ALL {
                for intensity in IntensityBand::ALL {
                    out.push(SceneAttributes {
                        shape,
                        quadrant,
                        intensity,
                    });
                }
            }
        }
        out
    }

    /// Concatenated one-hot encoding: shape (2), quadrant (4), band (3).
    pub fn conditioning(&self) -> Vec<f64> {
        let mut v = vec![0.0; COND_DIM];
        v[self.shape.index()] = 1.0;
        v[2 + self.quadrant.index()] = 1.0;
        v[6 + self.intensity.index()] = 1.0;
        v
    }

    /// Inverse of [`conditioning`](Self::conditioning).
    pub fn from_conditioning(v: &[f64]) -> Result<Self> {
        let pick = |slice: &[f64]| -> Result<usize> {
            let hot: Vec<usize> = slice
                .iter()
                .enumerate()
                .filter(|(_, &x)| x == 1.0)
                .map(|(i, _)| i)
                .collect();
            let ones_and_zeros = slice.iter().all(|&x| x == 0.0 || x == 1.0);
            match hot.as_slice() {
                [i] if ones_and_zeros => Ok(*i),
                _ => Err(Error::config(format!("not a one-hot block: {slice:?}"))),
            }
        };
        if v.len() != COND_DIM {
            return Err(Error::shape(format!("conditioning length {} != {COND_DIM}", v.len())));
        }
        Ok(Self {
            shape: ShapeClass::ALL[pick(&v[0..2])?],
            quadrant: Quadrant::ALL[pick(&v[2..6])?],
            intensity: IntensityBand::ALL[pick(&v[6..9])?],
        })
    }
}

/// A 16×16 grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    pixels: Tensor,
}

impl SceneImage {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.shape() != [IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::shape(format!(
                "scene must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {:?}",
                pixels.shape()
            )));
        }
        if !pixels.is_finite() {
            return Err(Error::shape("scene contains non-finite pixels"));
        }
        Ok(Self { pixels })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            pixels: Tensor::full(&[IMAGE_SIZE, IMAGE_SIZE], value),
        }
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels.data()[row * IMAGE_SIZE + col]
    }

    pub fn clamped(&self) -> Self {
        Self {
            pixels: self.pixels.map(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// Clamps to `[0, 1]` and snaps each pixel to the 16-bit grid used by
    /// the PGM store, so that a store round trip is exact.
    pub fn quantized(&self) -> Self {
        Self {
            pixels: self.pixels.map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0),
        }
    }

    /// Binary PGM (`P5`, 16-bit big-endian samples).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{IMAGE_SIZE} {IMAGE_SIZE}\n65535\n").into_bytes();
        for &v in self.pixels.data() {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("<pgm>", m.to_string());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        pos += 1;
        let expected = [
            "P5".to_string(),
            IMAGE_SIZE.to_string(),
            IMAGE_SIZE.to_string(),
            "65535".to_string(),
        ];
        if fields != expected {
            return Err(bad(&format!("unsupported header {fields:?}")));
        }
        let body = bytes.get(pos..).ok_or_else(|| bad("missing body"))?;
        if body.len() != IMAGE_SIZE * IMAGE_SIZE * 2 {
            return Err(bad("wrong body length"));
        }
        let data = body
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect();
        Self::new(Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE], data)?)
    }

    /// Hex SHA-256 prefix of the PGM encoding.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_pgm());
        hex::encode(&digest[..8])
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_pgm(&bytes).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path.display().to_string(), message),
            other => other,
        })
    }
}

/// Geometric description of one rendered figure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FigureSpec {
    pub shape: ShapeClass,
    /// Centre `(row, col)` in continuous pixel coordinates.
    pub center: (f64, f64),
    /// Radius for a disc, half side for a square.
    pub size: f64,
    pub intensity: f64,
    pub background: f64,
    /// Relative boundary modulation amplitude; 0 gives the ideal outline.
    pub wobble: f64,
    pub wobble_freq: f64,
    pub wobble_phase: f64,
}

impl FigureSpec {
    /// Noise-free, perfectly regular figure realising `attrs`.
    pub fn ideal(attrs: &SceneAttributes) -> Self {
        Self {
            shape: attrs.shape,
            center: attrs.quadrant.center(),
            size: IDEAL_SIZE,
            intensity: attrs.intensity.nominal(),
            background: IDEAL_BACKGROUND,
            wobble: 0.0,
            wobble_freq: 0.0,
            wobble_phase: 0.0,
        }
    }

    /// Whether the pixel centred at `(row + 0.5, col + 0.5)` lies inside.
    pub fn covers(&self, row: usize, col: usize) -> bool {
        let dy = row as f64 + 0.5 - self.center.0;
        let dx = col as f64 + 0.5 - self.center.1;
        let reach = if self.wobble == 0.0 {
            self.size
        } else {
            let theta = dy.atan2(dx);
            self.size * (1.0 + self.wobble * (self.wobble_freq * theta + self.wobble_phase).sin())
        };
        match self.shape {
            ShapeClass::Disc => dx * dx + dy * dy <= reach * reach,
            ShapeClass::Square => dx.abs().max(dy.abs()) <= reach,
        }
    }

    pub fn render(&self) -> SceneImage {
        let mut t = Tensor::full(&[IMAGE_SIZE, IMAGE_SIZE], self.background);
        for r in 0..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                if self.covers(r, c) {
                    t.data_mut()[r * IMAGE_SIZE + c] = self.intensity;
                }
            }
        }
        SceneImage { pixels: t }
    }
}

/// The analytic, noise-free scene for `attrs`.
pub fn render_ideal(attrs: &SceneAttributes) -> SceneImage {
    FigureSpec::ideal(attrs).render()
}

/// A scene with random placement jitter, size, contrast, outline wobble
/// and pixel noise: the kind of varied-quality data the base model is
/// trained on.
pub fn render_varied(attrs: &SceneAttributes, rng: &mut RandomSource) -> SceneImage {
    let (r0, c0) = attrs.quadrant.center();
    let mut spec = FigureSpec::ideal(attrs);
    spec.center = (r0 + rng.uniform_range(-1.0, 1.0), c0 + rng.uniform_range(-1.0, 1.0));
    spec.size = rng.uniform_range(2.4, 3.6);
    spec.intensity = attrs.intensity.nominal() + rng.uniform_range(-0.07, 0.07);
    spec.background = rng.uniform_range(0.04, 0.18);
    if rng.uniform() < 0.5 {
        spec.wobble = rng.uniform_range(0.05, 0.3);
        spec.wobble_freq = (3 + rng.below(3)) as f64;
        spec.wobble_phase = rng.uniform_range(0.0, 2.0 * PI);
    }
    let noise = if rng.uniform() < 0.4 {
        0.0
    } else {
        rng.uniform_range(0.02, 0.12)
    };
    let clean = spec.render();
    let mut px = clean.pixels;
    for v in px.data_mut() {
        *v = (*v + noise * rng.normal()).clamp(0.0, 1.0);
    }
    SceneImage { pixels: px }
}

/// Rearranges a `[16, 16]` image into `[16 patches, 16 values]`, patches in
/// row-major order over the 4×4 patch grid.
pub fn patchify(image: &Tensor) -> Tensor {
    let mut out = vec![0.0; NUM_PATCHES * PATCH_DIM];
    for r in 0..IMAGE_SIZE {
        for c in 0..IMAGE_SIZE {
            let p = (r / PATCH) * PATCHES_PER_SIDE + c / PATCH;
            let k = (r % PATCH) * PATCH + c % PATCH;
            out[p * PATCH_DIM + k] = image.data()[r * IMAGE_SIZE + c];
        }
    }
    Tensor::new(vec![NUM_PATCHES, PATCH_DIM], out).expect("fixed patch layout")
}

pub fn unpatchify(patches: &Tensor) -> Tensor {
    let mut out = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    for r in 0..IMAGE_SIZE {
        for c in 0..IMAGE_SIZE {
            let p = (r / PATCH) * PATCHES_PER_SIDE + c / PATCH;
            let k = (r % PATCH) * PATCH + c % PATCH;
            out[r * IMAGE_SIZE + c] = patches.data()[p * PATCH_DIM + k];
        }
    }
    Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE], out).expect("fixed patch layout")
}
