//! Procedural clean images and parametric synthetic degradations.
//!
//! Images are `[3, H, W]` tensors with values in `[0, 1]`. Every generator is
//! a pure function of its inputs and a 64-bit seed.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Image = Tensor<f32>;

pub const MIN_SIDE: usize = 16;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dims(img: &Image, op: &'static str) -> Result<(usize, usize)> {
    match *img.shape() {
        [3, h, w] => Ok((h, w)),
        ref s => Err(Error::shape(op, format!("image {s:?} is not [3, H, W]"))),
    }
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// Deterministic texture: smooth colour gradients, a few flat shapes and a sum
/// of random sinusoids, stretched to `[0.02, 0.98]` per image.
pub fn gen_clean(seed: u64, h: usize, w: usize) -> Result<Image> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::invalid(
            "gen_clean",
            format!("{h}x{w} is below the {MIN_SIDE}x{MIN_SIDE} minimum"),
        ));
    }
    let mut rng = rng_for(seed);
    let mut data = vec![0.0f64; 3 * h * w];
    let (hf, wf) = (h as f64, w as f64);

    for c in 0..3 {
        let (a, b, base) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.2..0.8));
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                let freq = rng.gen_range(1.0..6.0);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                (freq * theta.cos(), freq * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.05..0.2))
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / wf, y as f64 / hf);
                let mut val = base + 0.3 * (a * (u - 0.5) + b * (v - 0.5));
                for &(fx, fy, phase, amp) in &waves {
                    val += amp * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
                }
                data[(c * h + y) * w + x] = val;
            }
        }
    }

    let shapes = rng.gen_range(2..6);
    for _ in 0..shapes {
        let colour: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let (cy, cx) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
        let size = rng.gen_range(0.1..0.35) * hf.min(wf);
        let disc = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    dy * dy + dx * dx <= size * size
                } else {
                    dy.abs() <= size && dx.abs() <= 0.7 * size
                };
                if inside {
                    for (c, col) in colour.iter().enumerate() {
                        data[(c * h + y) * w + x] = *col;
                    }
                }
            }
        }
    }

    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-9);
    let pixels = data
        .iter()
        .map(|&v| (0.02 + 0.96 * (v - lo) / span) as f32)
        .collect();
    Tensor::new(vec![3, h, w], pixels)
}

/// Zero-mean Gaussian field with standard deviation `sigma / 255`.
pub fn gaussian_noise_field(len: usize, sigma: f64, seed: u64) -> Result<Vec<f32>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid("add_gaussian_noise", format!("sigma {sigma} must be >= 0")));
    }
    let normal = Normal::new(0.0, sigma / 255.0).map_err(|e| Error::invalid("add_gaussian_noise", e.to_string()))?;
    let mut rng = rng_for(seed);
    Ok((0..len).map(|_| normal.sample(&mut rng) as f32).collect())
}

/// `clamp(img + n)`, `n ~ N(0, (sigma/255)^2)` with `sigma` in 8-bit units.
pub fn add_gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Result<Image> {
    dims(img, "add_gaussian_noise")?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let noise = gaussian_noise_field(img.numel(), sigma, seed)?;
    let data = img.data().iter().zip(noise).map(|(&p, n)| clamp01(p + n)).collect();
    Tensor::new(img.shape().to_vec(), data)
}

/// Atmospheric scattering with constant transmission: `img * t + A * (1 - t)`.
pub fn apply_haze(img: &Image, airlight: f64, transmission: f64) -> Result<Image> {
    dims(img, "apply_haze")?;
    if !(0.0..=1.0).contains(&airlight) {
        return Err(Error::invalid("apply_haze", format!("airlight {airlight} outside [0, 1]")));
    }
    if !(transmission > 0.0 && transmission <= 1.0) {
        return Err(Error::invalid("apply_haze", format!("transmission {transmission} outside (0, 1]")));
    }
    if transmission == 1.0 {
        return Ok(img.clone());
    }
    let (t, a) = (transmission as f32, airlight as f32);
    Ok(img.map(|p| clamp01(p * t + a * (1.0 - t))))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RainParams {
    pub count: usize,
    pub length: usize,
    /// Streak direction in degrees from the horizontal axis.
    pub angle: f64,
    pub intensity: f64,
}

/// Adds `count` bright one-pixel streaks of the given direction at random positions.
pub fn apply_rain(img: &Image, p: &RainParams, seed: u64) -> Result<Image> {
    let (h, w) = dims(img, "apply_rain")?;
    if !(p.intensity.is_finite() && (0.0..=1.0).contains(&p.intensity)) || !p.angle.is_finite() || p.length == 0 {
        return Err(Error::invalid("apply_rain", format!("invalid streak parameters {p:?}")));
    }
    if p.count == 0 {
        return Ok(img.clone());
    }
    let mut layer = vec![0.0f32; h * w];
    let mut rng = rng_for(seed);
    let (dx, dy) = (p.angle.to_radians().cos(), p.angle.to_radians().sin());
    for _ in 0..p.count {
        let (x0, y0) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let strength = (p.intensity * rng.gen_range(0.7..1.0)) as f32;
        for s in 0..p.length {
            let x = (x0 + dx * s as f64).round();
            let y = (y0 + dy * s as f64).round();
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                let cell = &mut layer[y as usize * w + x as usize];
                *cell = cell.max(strength);
            }
        }
    }
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = clamp01(*v + layer[i % (h * w)]);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlurParams {
    pub length: usize,
    pub angle: f64,
}

/// Normalised line kernel of odd side `length` (even lengths are rounded up).
pub fn line_kernel(p: &BlurParams) -> Vec<Vec<f64>> {
    let side = p.length | 1;
    let mut k = vec![vec![0.0; side]; side];
    let centre = (side / 2) as f64;
    let (dx, dy) = (p.angle.to_radians().cos(), p.angle.to_radians().sin());
    let samples = 4 * side;
    let half = (p.length as f64 - 1.0) / 2.0;
    for i in 0..samples {
        let s = if samples > 1 { -half + 2.0 * half * i as f64 / (samples - 1) as f64 } else { 0.0 };
        let x = (centre + dx * s).round() as usize;
        let y = (centre + dy * s).round() as usize;
        k[y.min(side - 1)][x.min(side - 1)] += 1.0;
    }
    let total: f64 = k.iter().flatten().sum();
    for row in &mut k {
        for v in row {
            *v /= total;
        }
    }
    k
}

/// Motion blur with a line kernel and mirror padding.
pub fn apply_blur(img: &Image, p: &BlurParams) -> Result<Image> {
    let (h, w) = dims(img, "apply_blur")?;
    if p.length == 0 || !p.angle.is_finite() || p.length > h.min(w) {
        return Err(Error::invalid("apply_blur", format!("invalid kernel {p:?} for {h}x{w}")));
    }
    if p.length == 1 {
        return Ok(img.clone());
    }
    let k = line_kernel(p);
    let r = (k.len() / 2) as isize;
    let src = img.data();
    let mut out = vec![0.0f32; src.len()];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ky, row) in k.iter().enumerate() {
                    let sy = crate::tensor::reflect(y as isize + ky as isize - r, h);
                    for (kx, &kv) in row.iter().enumerate() {
                        if kv != 0.0 {
                            let sx = crate::tensor::reflect(x as isize + kx as isize - r, w);
                            acc += kv * src[(c * h + sy) * w + sx] as f64;
                        }
                    }
                }
                out[(c * h + y) * w + x] = clamp01(acc as f32);
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// `scale * img^gamma`, `gamma >= 1`, `scale` in `(0, 1]`.
pub fn apply_lowlight(img: &Image, gamma: f64, scale: f64) -> Result<Image> {
    dims(img, "apply_lowlight")?;
    if !(gamma.is_finite() && gamma >= 1.0) || !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::invalid("apply_lowlight", format!("gamma {gamma}, scale {scale}")));
    }
    if gamma == 1.0 && scale == 1.0 {
        return Ok(img.clone());
    }
    let (g, s) = (gamma as f32, scale as f32);
    Ok(img.map(|p| clamp01(s * p.powf(g))))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    Noise { sigma: f64 },
    Rain(RainParams),
    Haze { airlight: f64, transmission: f64 },
    Blur(BlurParams),
    LowLight { gamma: f64, scale: f64 },
}

impl Degradation {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Noise { .. } => "noise",
            Self::Rain(_) => "rain",
            Self::Haze { .. } => "haze",
            Self::Blur(_) => "blur",
            Self::LowLight { .. } => "lowlight",
        }
    }

    pub fn apply(&self, img: &Image, seed: u64) -> Result<Image> {
        match *self {
            Self::Noise { sigma } => add_gaussian_noise(img, sigma, seed),
            Self::Rain(ref p) => apply_rain(img, p, seed),
            Self::Haze { airlight, transmission } => apply_haze(img, airlight, transmission),
            Self::Blur(ref p) => apply_blur(img, p),
            Self::LowLight { gamma, scale } => apply_lowlight(img, gamma, scale),
        }
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Noise { sigma } => write!(f, "noise:sigma={sigma}"),
            Self::Rain(p) => write!(
                f,
                "rain:count={},length={},angle={},intensity={}",
                p.count, p.length, p.angle, p.intensity
            ),
            Self::Haze { airlight, transmission } => write!(f, "haze:a={airlight},t={transmission}"),
            Self::Blur(p) => write!(f, "blur:length={},angle={}", p.length, p.angle),
            Self::LowLight { gamma, scale } => write!(f, "lowlight:gamma={gamma},scale={scale}"),
        }
    }
}

impl FromStr for Degradation {
    type Err = Error;

    /// `kind:key=value,...`; omitted keys take the documented defaults.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |detail: String| Error::invalid("degradation", detail);
        let (kind, rest) = s.trim().split_once(':').unwrap_or((s.trim(), ""));
        let mut fields = Vec::new();
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("{part:?} is not key=value")))?;
            let v: f64 = v.trim().parse().map_err(|_| bad(format!("{part:?} has a non-numeric value")))?;
            if !v.is_finite() {
                return Err(bad(format!("{part:?} is not finite")));
            }
            fields.push((k.trim().to_string(), v));
        }
        let mut take = |key: &str, default: f64| -> f64 {
            match fields.iter().position(|(k, _)| k == key) {
                Some(i) => fields.remove(i).1,
                None => default,
            }
        };
        let count = |v: f64, key: &str| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(bad(format!("{key} must be a non-negative integer")))
            }
        };
        let d = match kind {
            "noise" => Self::Noise { sigma: take("sigma", 25.0) },
            "haze" => Self::Haze {
                airlight: take("a", 0.85),
                transmission: take("t", 0.5),
            },
            "rain" => Self::Rain(RainParams {
                count: count(take("count", 40.0), "count")?,
                length: count(take("length", 8.0), "length")?,
                angle: take("angle", 80.0),
                intensity: take("intensity", 0.6),
            }),
            "blur" => Self::Blur(BlurParams {
                length: count(take("length", 7.0), "length")?,
                angle: take("angle", 0.0),
            }),
            "lowlight" => Self::LowLight {
                gamma: take("gamma", 2.0),
                scale: take("scale", 0.5),
            },
            other => return Err(bad(format!("unknown degradation kind {other:?}"))),
        };
        if let Some((k, _)) = fields.first() {
            return Err(bad(format!("unknown {kind} parameter {k:?}")));
        }
        d.validate()?;
        Ok(d)
    }
}

impl Degradation {
    /// Range checks shared by parsing and sampling.
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Noise { sigma } => sigma.is_finite() && sigma >= 0.0,
            Self::Haze { airlight, transmission } => {
                (0.0..=1.0).contains(&airlight) && transmission > 0.0 && transmission <= 1.0
            }
            Self::Rain(p) => p.length >= 1 && p.angle.is_finite() && (0.0..=1.0).contains(&p.intensity),
            Self::Blur(p) => p.length >= 1 && p.angle.is_finite(),
            Self::LowLight { gamma, scale } => gamma.is_finite() && gamma >= 1.0 && scale > 0.0 && scale <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("degradation", format!("{self} is out of range")))
        }
    }
}

/// One degradation with its own seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub degradation: Degradation,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(degradation: Degradation, seed: u64) -> Self {
        Self { degradation, seed }
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        self.degradation.apply(img, self.seed)
    }
}

/// `+`-joined kinds of a spec list, e.g. `noise+haze`.
pub fn label_of(specs: &[DegradationSpec]) -> String {
    specs.iter().map(|s| s.degradation.kind()).collect::<Vec<_>>().join("+")
}

/// `+`-joined degradation strings, without seeds.
pub fn format_specs(specs: &[Degradation]) -> String {
    specs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("+")
}

pub fn parse_specs(text: &str) -> Result<Vec<Degradation>> {
    let specs = text
        .split('+')
        .map(str::parse)
        .collect::<Result<Vec<Degradation>>>()?;
    Ok(specs)
}

/// Clean image, its degraded counterpart and the degradations applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub clean: Image,
    pub degraded: Image,
    pub specs: Vec<DegradationSpec>,
}

impl Sample {
    pub fn label(&self) -> String {
        label_of(&self.specs)
    }
}

/// Applies `specs` in order, each with its own seed.
pub fn compose(id: impl Into<String>, clean: &Image, specs: &[DegradationSpec]) -> Result<Sample> {
    if specs.is_empty() {
        return Err(Error::invalid("compose", "no degradations given"));
    }
    let mut degraded = clean.clone();
    for s in specs {
        degraded = s.apply(&degraded)?;
    }
    Ok(Sample {
        id: id.into(),
        clean: clean.clone(),
        degraded,
        specs: specs.to_vec(),
    })
}

/// Crop window and flips drawn from `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl PatchWindow {
    pub fn draw(h: usize, w: usize, size: usize, seed: u64, flips: bool) -> Result<Self> {
        if size == 0 || size > h.min(w) {
            return Err(Error::invalid("sample_patch", format!("patch {size} does not fit {h}x{w}")));
        }
        let mut rng = rng_for(seed);
        let top = rng.gen_range(0..=h - size);
        let left = rng.gen_range(0..=w - size);
        let (flip_h, flip_v) = if flips { (rng.gen(), rng.gen()) } else { (false, false) };
        Ok(Self {
            top,
            left,
            size,
            flip_h,
            flip_v,
        })
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        let (h, w) = dims(img, "sample_patch")?;
        let s = self.size;
        if self.top + s > h || self.left + s > w {
            return Err(Error::invalid("sample_patch", format!("window {self:?} outside {h}x{w}")));
        }
        let src = img.data();
        let mut out = Vec::with_capacity(3 * s * s);
        for c in 0..3 {
            for y in 0..s {
                let sy = self.top + if self.flip_v { s - 1 - y } else { y };
                for x in 0..s {
                    let sx = self.left + if self.flip_h { s - 1 - x } else { x };
                    out.push(src[(c * h + sy) * w + sx]);
                }
            }
        }
        Tensor::new(vec![3, s, s], out)
    }
}

/// Same random crop and flips for both halves of a sample.
pub fn sample_patch(sample: &Sample, size: usize, seed: u64, flips: bool) -> Result<Sample> {
    let (h, w) = dims(&sample.clean, "sample_patch")?;
    let window = PatchWindow::draw(h, w, size, seed, flips)?;
    Ok(Sample {
        id: sample.id.clone(),
        clean: window.apply(&sample.clean)?,
        degraded: window.apply(&sample.degraded)?,
        specs: sample.specs.clone(),
    })
}

/// Horizontal mirror of an image.
pub fn flip_horizontal(img: &Image) -> Result<Image> {
    let (_, w) = dims(img, "flip_horizontal")?;
    let mut out = Vec::with_capacity(img.numel());
    for row in img.data().chunks(w) {
        out.extend(row.iter().rev());
    }
    Tensor::new(img.shape().to_vec(), out)
}
