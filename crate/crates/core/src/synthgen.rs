//! Seeded generator of sonar-like frames with exact point ground truth.
//!
//! A frame is rendered as a scalar echo-intensity field: a faint seabed
//! gradient, elongated Gaussian fish blobs, optional large noise objects
//! (elliptical "dolphins" and arc-shaped "nets"), per-pixel speckle and small
//! clutter specks. The field is mapped through a fixed blue-to-white ramp.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagedata::{ImageMeta, LabeledSample, NoiseBox, NoiseKind, PointAnnotation, RawImage, RgbImage};
use crate::par;
use crate::seed::{self, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CountDistribution {
    /// `c + 1` is log-uniform on `[lo + 1, hi + 2)`, floored.
    LogUniform { lo: u32, hi: u32 },
    Fixed { n: u32 },
}

impl CountDistribution {
    pub fn sample(&self, rng: &mut SeededRng) -> u32 {
        match *self {
            CountDistribution::Fixed { n } => n,
            CountDistribution::LogUniform { lo, hi } => {
                let a = (lo as f64 + 1.0).ln();
                let b = (hi as f64 + 2.0).ln();
                let u: f64 = rng.random_range(a..b);
                ((u.exp().floor() - 1.0) as u32).clamp(lo, hi)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub count_distribution: CountDistribution,
    /// Probability that a frame carries dolphins or nets.
    pub noise_rate: f64,
    /// Speckle and clutter amplitude in `[0, 1]`.
    pub speckle_level: f64,
    /// Per-frame amplitude is drawn from
    /// `[speckle_level * (1 - speckle_variation), speckle_level]`.
    pub speckle_variation: f64,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    /// Fish major-axis length range in pixels.
    pub blob_length: (f64, f64),
    pub meters_per_pixel: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count_distribution: CountDistribution::LogUniform { lo: 0, hi: 438 },
            noise_rate: 0.3,
            speckle_level: 0.3,
            speckle_variation: 0.0,
            image_size: (320, 576),
            blob_length: (6.0, 10.0),
            meters_per_pixel: 8.5 / 576.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth spec: {m}")));
        match self.count_distribution {
            CountDistribution::LogUniform { lo, hi } if lo > hi || hi > 500 => {
                return bad(format!("log-uniform bounds {lo}..{hi} must satisfy lo <= hi <= 500"))
            }
            CountDistribution::Fixed { n } if n > 500 => return bad(format!("fixed count {n} > 500")),
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 1]", self.noise_rate));
        }
        if !(0.0..=1.0).contains(&self.speckle_level) || !(0.0..=1.0).contains(&self.speckle_variation) {
            return bad("speckle level and variation must lie in [0, 1]".into());
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return bad(format!("image size {:?} too small", self.image_size));
        }
        if !(self.blob_length.0 > 0.0 && self.blob_length.0 <= self.blob_length.1) {
            return bad(format!("blob length range {:?}", self.blob_length));
        }
        if !(self.meters_per_pixel > 0.0) {
            return bad("meters_per_pixel must be positive".into());
        }
        Ok(())
    }
}

struct Field {
    h: usize,
    w: usize,
    v: Vec<f32>,
}

impl Field {
    /// Adds an oriented Gaussian evaluated at pixel centers.
    fn add_gaussian(&mut self, cx: f64, cy: f64, sigma_major: f64, sigma_minor: f64, angle: f64, peak: f64) {
        let reach = (3.0 * sigma_major).ceil() as i64 + 1;
        let (sin, cos) = angle.sin_cos();
        let (r0, r1) = ((cy as i64 - reach).max(0), (cy as i64 + reach).min(self.h as i64 - 1));
        let (c0, c1) = ((cx as i64 - reach).max(0), (cx as i64 + reach).min(self.w as i64 - 1));
        for r in r0..=r1 {
            for c in c0..=c1 {
                let dx = c as f64 + 0.5 - cx;
                let dy = r as f64 + 0.5 - cy;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                let e = u * u / (2.0 * sigma_major * sigma_major) + v * v / (2.0 * sigma_minor * sigma_minor);
                if e < 12.0 {
                    self.v[r as usize * self.w + c as usize] += (peak * (-e).exp()) as f32;
                }
            }
        }
    }
}

/// Echo intensity to RGB. Monotone in every channel.
pub fn sonar_ramp(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = 255.0 * v * v;
    let g = 235.0 * v.powf(1.3) + 10.0 * v;
    let b = 30.0 + 225.0 * v.sqrt();
    [r.round() as u8, g.round().min(255.0) as u8, b.round().min(255.0) as u8]
}

fn sample_fish(spec: &SynthSpec, count: u32, rng: &mut SeededRng) -> Vec<PointAnnotation> {
    let (h, w) = (spec.image_size.0 as f64, spec.image_size.1 as f64);
    let n_schools = rng.random_range(1..=3);
    let schools: Vec<(f64, f64, f64)> = (0..n_schools)
        .map(|_| {
            let spread = w * (0.04 + 0.006 * (count as f64).sqrt()) * rng.random_range(0.6..1.4);
            (rng.random_range(0.1 * w..0.9 * w), rng.random_range(0.1 * h..0.9 * h), spread)
        })
        .collect();
    (0..count)
        .map(|_| {
            let p = place_fish(&schools, w, h, rng);
            PointAnnotation::new(quantize(p.x), quantize(p.y))
        })
        .collect()
}

/// Snaps a coordinate to the center of a 1/1024-pixel cell. These values are
/// exact in binary, so mirroring `x -> W - x` is an exact involution.
fn quantize(v: f64) -> f64 {
    ((v * 1024.0).floor() + 0.5) / 1024.0
}

fn place_fish(schools: &[(f64, f64, f64)], w: f64, h: f64, rng: &mut SeededRng) -> PointAnnotation {
    if rng.random_bool(0.7) {
        let (sx, sy, spread) = schools[rng.random_range(0..schools.len())];
        for _ in 0..20 {
            let nx: f64 = StandardNormal.sample(rng);
            let ny: f64 = StandardNormal.sample(rng);
            let p = PointAnnotation::new(sx + spread * nx, sy + spread * 0.6 * ny);
            if p.inside(0.0, 0.0, w, h) {
                return p;
            }
        }
    }
    PointAnnotation::new(rng.random_range(0.0..w), rng.random_range(0.0..h))
}

fn add_noise_objects(field: &mut Field, rng: &mut SeededRng) -> Vec<NoiseBox> {
    let (h, w) = (field.h as f64, field.w as f64);
    let n = rng.random_range(1..=3);
    let mut boxes = Vec::new();
    for _ in 0..n {
        let cx = rng.random_range(0.1 * w..0.9 * w);
        let cy = rng.random_range(0.1 * h..0.9 * h);
        let (kind, points): (NoiseKind, Vec<(f64, f64)>) = if rng.random_bool(0.6) {
            // Dolphin: a long bright body with a soft edge.
            let len = w * rng.random_range(0.12..0.2);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let (sin, cos) = angle.sin_cos();
            let steps = (len as usize).max(4);
            let mut pts = Vec::with_capacity(steps);
            for i in 0..steps {
                let t = i as f64 / (steps - 1) as f64 - 0.5;
                let (px, py) = (cx + t * len * cos, cy + t * len * sin);
                let girth = len * 0.12 * (1.0 - 4.0 * t * t).max(0.15).sqrt();
                field.add_gaussian(px, py, girth, girth, 0.0, 0.09);
                pts.push((px, py));
            }
            let pad = len * 0.15;
            (NoiseKind::Dolphin, pts.into_iter().flat_map(|(x, y)| [(x - pad, y - pad), (x + pad, y + pad)]).collect())
        } else {
            // Net: a thick arc of a circle seen from above.
            let radius = w * rng.random_range(0.06..0.12);
            let start = rng.random_range(0.0..std::f64::consts::TAU);
            let sweep = rng.random_range(3.0..5.5);
            let steps = (radius * sweep) as usize + 2;
            let mut pts = Vec::with_capacity(steps);
            for i in 0..steps {
                let a = start + sweep * i as f64 / (steps - 1) as f64;
                let (px, py) = (cx + radius * a.cos(), cy + radius * a.sin());
                field.add_gaussian(px, py, 1.2, 1.2, 0.0, 0.35);
                pts.push((px - 3.0, py - 3.0));
                pts.push((px + 3.0, py + 3.0));
            }
            (NoiseKind::Net, pts)
        };
        let x0 = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor();
        let y0 = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor();
        let x1 = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil();
        let y1 = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil();
        let b = NoiseBox { x0, y0, x1, y1, kind };
        if let Some(b) = b.clip(0.0, 0.0, w, h) {
            boxes.push(b);
        }
    }
    boxes
}

/// Renders frame `index`; a pure function of `(spec, index)`.
pub fn generate_sample(spec: &SynthSpec, index: u64) -> LabeledSample {
    render(spec, "labelled", index, "L")
}

fn render(spec: &SynthSpec, purpose: &str, index: u64, prefix: &str) -> LabeledSample {
    let mut rng = seed::rng(spec.seed, purpose, index);
    let (h, w) = spec.image_size;
    let mut field = Field { h, w, v: vec![0.0; h * w] };
    for r in 0..h {
        let base = 0.06 + 0.06 * r as f32 / h as f32;
        field.v[r * w..(r + 1) * w].fill(base);
    }

    let count = spec.count_distribution.sample(&mut rng);
    let points = sample_fish(spec, count, &mut rng);
    for p in &points {
        let len = rng.random_range(spec.blob_length.0..=spec.blob_length.1);
        let sigma_major = len / 4.0;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let peak = rng.random_range(0.45..0.8);
        field.add_gaussian(p.x, p.y, sigma_major, sigma_major * 0.45, angle, peak);
    }

    let noise = if rng.random_bool(spec.noise_rate) { add_noise_objects(&mut field, &mut rng) } else { Vec::new() };

    let amp = spec.speckle_level * (1.0 - spec.speckle_variation * rng.random_range(0.0..1.0));
    if amp > 0.0 {
        let n_specks = (amp * (h * w) as f64 / 400.0).round() as usize;
        for _ in 0..n_specks {
            let (x, y) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let s = rng.random_range(0.5..1.1);
            field.add_gaussian(x, y, s, s, 0.0, amp * rng.random_range(0.4..1.0));
        }
        for v in field.v.iter_mut() {
            let n: f32 = StandardNormal.sample(&mut rng);
            *v += (amp as f32) * 0.12 * n.abs();
        }
    }

    let mut pixels = RgbImage::filled(h, w, [0, 0, 0]);
    for r in 0..h {
        for c in 0..w {
            pixels.set(r, c, sonar_ramp(field.v[r * w + c]));
        }
    }
    LabeledSample {
        image: RawImage {
            pixels,
            meta: ImageMeta { meters_per_pixel: spec.meters_per_pixel, source_id: format!("{prefix}{index:05}") },
        },
        points,
        noise,
    }
}

/// Unlabelled frame. `hidden_points` is ground truth retained only for
/// verifying pair ordering; training never reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabelledImage {
    pub image: RawImage,
    pub hidden_points: Vec<PointAnnotation>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub labelled: Vec<LabeledSample>,
    pub unlabelled: Vec<UnlabelledImage>,
}

pub fn generate_unlabelled(spec: &SynthSpec, index: u64) -> UnlabelledImage {
    let s = render(spec, "unlabelled", index, "U");
    UnlabelledImage { image: s.image, hidden_points: s.points }
}

pub fn generate_dataset(spec: &SynthSpec, n_labelled: usize, n_unlabelled: usize) -> Result<SynthDataset> {
    spec.validate()?;
    let labelled = par::map_indices(n_labelled, |i| generate_sample(spec, i as u64));
    let unlabelled = par::map_indices(n_unlabelled, |i| generate_unlabelled(spec, i as u64));
    Ok(SynthDataset { labelled, unlabelled })
}
