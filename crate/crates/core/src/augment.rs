//! Annotation-preserving augmentation. Every op keeps the frame size; pixels
//! and points go through the same geometric map and points that leave the
//! frame are dropped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagedata::{ImageMeta, LabeledSample, NoiseBox, PointAnnotation, RawImage, RgbImage};
use crate::par;
use crate::seed;

/// Largest rotation, in degrees, that `RotateSmall` accepts.
pub const MAX_ROTATION_DEG: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    CropCompose,
    Translate,
    Hflip,
    RotateSmall,
    SuperimposeNoise,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 5] = [
        AugmentKind::CropCompose,
        AugmentKind::Translate,
        AugmentKind::Hflip,
        AugmentKind::RotateSmall,
        AugmentKind::SuperimposeNoise,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AugmentKind::CropCompose => "crop_compose",
            AugmentKind::Translate => "translate",
            AugmentKind::Hflip => "hflip",
            AugmentKind::RotateSmall => "rotate_small",
            AugmentKind::SuperimposeNoise => "superimpose_noise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentOp {
    /// Copies the `w x h` block at `(x0, y0)` onto a blank canvas at
    /// `(place_x, place_y)`.
    CropCompose { x0: usize, y0: usize, w: usize, h: usize, place_x: usize, place_y: usize },
    Translate { dx: i64, dy: i64 },
    Hflip,
    /// Rotation about the frame center; positive is clockwise on screen.
    RotateSmall { degrees: f64 },
    /// Pastes noise pixels from `donor_box` of the donor frame with their
    /// top-left corner at `(place_x, place_y)`.
    SuperimposeNoise { donor_box: NoiseBox, place_x: usize, place_y: usize },
}

impl AugmentOp {
    pub fn kind(&self) -> AugmentKind {
        match self {
            AugmentOp::CropCompose { .. } => AugmentKind::CropCompose,
            AugmentOp::Translate { .. } => AugmentKind::Translate,
            AugmentOp::Hflip => AugmentKind::Hflip,
            AugmentOp::RotateSmall { .. } => AugmentKind::RotateSmall,
            AugmentOp::SuperimposeNoise { .. } => AugmentKind::SuperimposeNoise,
        }
    }

    /// Maps a point through the op; `None` when it leaves the frame or the
    /// retained region.
    pub fn map_point(&self, p: PointAnnotation, h: usize, w: usize) -> Option<PointAnnotation> {
        let (wf, hf) = (w as f64, h as f64);
        let q = match *self {
            AugmentOp::CropCompose { x0, y0, w: cw, h: ch, place_x, place_y } => {
                let (x0, y0) = (x0 as f64, y0 as f64);
                if !p.inside(x0, y0, x0 + cw as f64, y0 + ch as f64) {
                    return None;
                }
                PointAnnotation::new(p.x - x0 + place_x as f64, p.y - y0 + place_y as f64)
            }
            AugmentOp::Translate { dx, dy } => PointAnnotation::new(p.x + dx as f64, p.y + dy as f64),
            AugmentOp::Hflip => PointAnnotation::new(wf - p.x, p.y),
            AugmentOp::RotateSmall { degrees } => {
                let (s, c) = degrees.to_radians().sin_cos();
                let (ux, uy) = (p.x - wf / 2.0, p.y - hf / 2.0);
                PointAnnotation::new(c * ux - s * uy + wf / 2.0, s * ux + c * uy + hf / 2.0)
            }
            AugmentOp::SuperimposeNoise { .. } => p,
        };
        q.inside(0.0, 0.0, wf, hf).then_some(q)
    }
}

/// Everything an op may need besides the sample itself.
#[derive(Debug, Clone, Copy)]
pub struct AugmentContext<'a> {
    /// Fill value for uncovered pixels.
    pub background: [u8; 3],
    pub donor: Option<&'a LabeledSample>,
    /// Donor pixels within this distance of a donor fish are not pasted.
    pub fish_radius: f64,
}

fn invalid(op: &AugmentOp, message: String) -> Error {
    Error::Augment { op: op.kind().name(), message }
}

fn validate(op: &AugmentOp, h: usize, w: usize, ctx: &AugmentContext) -> Result<()> {
    match *op {
        AugmentOp::CropCompose { x0, y0, w: cw, h: ch, place_x, place_y } => {
            if cw == 0 || ch == 0 || x0 + cw > w || y0 + ch > h || place_x + cw > w || place_y + ch > h {
                return Err(invalid(op, format!("crop {cw}x{ch} at ({x0},{y0}) placed at ({place_x},{place_y}) does not fit {w}x{h}")));
            }
        }
        AugmentOp::Translate { dx, dy } => {
            if dx.unsigned_abs() as usize >= w || dy.unsigned_abs() as usize >= h {
                return Err(invalid(op, format!("offset ({dx},{dy}) exceeds frame {w}x{h}")));
            }
        }
        AugmentOp::Hflip => {}
        AugmentOp::RotateSmall { degrees } => {
            if !(degrees.abs() <= MAX_ROTATION_DEG) {
                return Err(invalid(op, format!("angle {degrees} outside +-{MAX_ROTATION_DEG} degrees")));
            }
        }
        AugmentOp::SuperimposeNoise { donor_box: b, place_x, place_y } => {
            let donor = ctx.donor.ok_or_else(|| invalid(op, "no donor frame supplied".into()))?;
            let (dw, dh) = (donor.image.width() as f64, donor.image.height() as f64);
            if !(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= dw && b.y1 <= dh && b.x0 < b.x1 && b.y0 < b.y1) {
                return Err(invalid(op, "donor box outside donor frame".into()));
            }
            let (bw, bh) = box_extent(&b);
            if place_x + bw > w || place_y + bh > h {
                return Err(invalid(op, format!("pasted {bw}x{bh} box at ({place_x},{place_y}) does not fit {w}x{h}")));
            }
        }
    }
    Ok(())
}

/// Integer pixel span covered by a box.
fn box_extent(b: &NoiseBox) -> (usize, usize) {
    let (c0, r0) = (b.x0.floor() as usize, b.y0.floor() as usize);
    (b.x1.ceil() as usize - c0, b.y1.ceil() as usize - r0)
}

fn bilinear(src: &RgbImage, x: f64, y: f64, background: [u8; 3]) -> [u8; 3] {
    // Sample position in index space (pixel centers at integers).
    let (sx, sy) = (x - 0.5, y - 0.5);
    let (w, h) = (src.width() as i64, src.height() as i64);
    let (c0, r0) = (sx.floor() as i64, sy.floor() as i64);
    let (fx, fy) = (sx - c0 as f64, sy - r0 as f64);
    let fetch = |r: i64, c: i64| {
        if r < 0 || c < 0 || r >= h || c >= w {
            background
        } else {
            src.get(r as usize, c as usize)
        }
    };
    let (a, b, c, d) = (fetch(r0, c0), fetch(r0, c0 + 1), fetch(r0 + 1, c0), fetch(r0 + 1, c0 + 1));
    let mut out = [0u8; 3];
    for ch in 0..3 {
        let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
        let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
        out[ch] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn transform_pixels(op: &AugmentOp, src: &RgbImage, ctx: &AugmentContext) -> RgbImage {
    let (h, w) = (src.height(), src.width());
    match *op {
        AugmentOp::CropCompose { x0, y0, w: cw, h: ch, place_x, place_y } => {
            let mut out = RgbImage::filled(h, w, ctx.background);
            out.paste(&src.crop(y0, x0, ch, cw), place_y as i64, place_x as i64);
            out
        }
        AugmentOp::Translate { dx, dy } => {
            let mut out = RgbImage::filled(h, w, ctx.background);
            out.paste(src, dy, dx);
            out
        }
        AugmentOp::Hflip => src.flip_horizontal(),
        AugmentOp::RotateSmall { degrees } => {
            let (s, c) = degrees.to_radians().sin_cos();
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            let mut out = RgbImage::filled(h, w, ctx.background);
            for r in 0..h {
                for col in 0..w {
                    // Inverse rotation of the output pixel center.
                    let (ux, uy) = (col as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
                    let (x, y) = (c * ux + s * uy + cx, -s * ux + c * uy + cy);
                    out.set(r, col, bilinear(src, x, y, ctx.background));
                }
            }
            out
        }
        AugmentOp::SuperimposeNoise { donor_box: b, place_x, place_y } => {
            let donor = ctx.donor.expect("validated");
            let mut out = src.clone();
            let (c0, r0) = (b.x0.floor() as usize, b.y0.floor() as usize);
            let (bw, bh) = box_extent(&b);
            let fish: Vec<&PointAnnotation> = donor
                .points
                .iter()
                .filter(|p| p.inside(b.x0 - ctx.fish_radius, b.y0 - ctx.fish_radius, b.x1 + ctx.fish_radius, b.y1 + ctx.fish_radius))
                .collect();
            let r2 = ctx.fish_radius * ctx.fish_radius;
            for dr in 0..bh {
                for dc in 0..bw {
                    let (sr, sc) = (r0 + dr, c0 + dc);
                    let (px, py) = (sc as f64 + 0.5, sr as f64 + 0.5);
                    if fish.iter().any(|p| (p.x - px).powi(2) + (p.y - py).powi(2) <= r2) {
                        continue;
                    }
                    let d = donor.image.pixels.get(sr, sc);
                    let (tr, tc) = (place_y + dr, place_x + dc);
                    let t = out.get(tr, tc);
                    out.set(tr, tc, [t[0].max(d[0]), t[1].max(d[1]), t[2].max(d[2])]);
                }
            }
            out
        }
    }
}

fn map_box(op: &AugmentOp, b: &NoiseBox, h: usize, w: usize) -> Option<NoiseBox> {
    let (wf, hf) = (w as f64, h as f64);
    match *op {
        AugmentOp::CropCompose { x0, y0, w: cw, h: ch, place_x, place_y } => {
            let c = b.clip(x0 as f64, y0 as f64, (x0 + cw) as f64, (y0 + ch) as f64)?;
            let (ox, oy) = (place_x as f64 - x0 as f64, place_y as f64 - y0 as f64);
            Some(NoiseBox { x0: c.x0 + ox, y0: c.y0 + oy, x1: c.x1 + ox, y1: c.y1 + oy, kind: b.kind })
        }
        AugmentOp::Translate { dx, dy } => {
            let (dx, dy) = (dx as f64, dy as f64);
            NoiseBox { x0: b.x0 + dx, y0: b.y0 + dy, x1: b.x1 + dx, y1: b.y1 + dy, kind: b.kind }.clip(0.0, 0.0, wf, hf)
        }
        AugmentOp::Hflip => Some(NoiseBox { x0: wf - b.x1, y0: b.y0, x1: wf - b.x0, y1: b.y1, kind: b.kind }),
        AugmentOp::RotateSmall { .. } => {
            let corners = [(b.x0, b.y0), (b.x1, b.y0), (b.x0, b.y1), (b.x1, b.y1)];
            let (s, c) = match op {
                AugmentOp::RotateSmall { degrees } => degrees.to_radians().sin_cos(),
                _ => unreachable!(),
            };
            let mapped: Vec<(f64, f64)> = corners
                .iter()
                .map(|&(x, y)| {
                    let (ux, uy) = (x - wf / 2.0, y - hf / 2.0);
                    (c * ux - s * uy + wf / 2.0, s * ux + c * uy + hf / 2.0)
                })
                .collect();
            let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| mapped.iter().map(sel).fold(init, f);
            NoiseBox {
                x0: fold(f64::min, f64::INFINITY, |p| p.0),
                y0: fold(f64::min, f64::INFINITY, |p| p.1),
                x1: fold(f64::max, f64::NEG_INFINITY, |p| p.0),
                y1: fold(f64::max, f64::NEG_INFINITY, |p| p.1),
                kind: b.kind,
            }
            .clip(0.0, 0.0, wf, hf)
        }
        AugmentOp::SuperimposeNoise { .. } => Some(*b),
    }
}

/// Applies one op. Image dimensions never change.
pub fn apply(sample: &LabeledSample, op: &AugmentOp, ctx: &AugmentContext) -> Result<LabeledSample> {
    let (h, w) = (sample.image.height(), sample.image.width());
    validate(op, h, w, ctx)?;
    let pixels = transform_pixels(op, &sample.image.pixels, ctx);
    let points = sample.points.iter().filter_map(|&p| op.map_point(p, h, w)).collect();
    let mut noise: Vec<NoiseBox> = sample.noise.iter().filter_map(|b| map_box(op, b, h, w)).collect();
    if let AugmentOp::SuperimposeNoise { donor_box: b, place_x, place_y } = *op {
        let (bw, bh) = box_extent(&b);
        let (fx, fy) = (b.x0 - b.x0.floor(), b.y0 - b.y0.floor());
        let x0 = place_x as f64 + fx;
        let y0 = place_y as f64 + fy;
        noise.push(NoiseBox {
            x0,
            y0,
            x1: (x0 + (b.x1 - b.x0)).min((place_x + bw) as f64),
            y1: (y0 + (b.y1 - b.y0)).min((place_y + bh) as f64),
            kind: b.kind,
        });
    }
    Ok(LabeledSample { image: RawImage { pixels, meta: sample.image.meta.clone() }, points, noise })
}

/// Draws random parameters for `kind`. Returns `None` for
/// `SuperimposeNoise` when no donor has a noise box.
pub fn sample_op(kind: AugmentKind, h: usize, w: usize, donor: Option<&LabeledSample>, rng: &mut seed::SeededRng) -> Option<AugmentOp> {
    Some(match kind {
        AugmentKind::CropCompose => {
            let cw = rng.random_range((w / 4).max(1)..=w);
            let ch = rng.random_range((h / 4).max(1)..=h);
            AugmentOp::CropCompose {
                x0: rng.random_range(0..=w - cw),
                y0: rng.random_range(0..=h - ch),
                w: cw,
                h: ch,
                place_x: rng.random_range(0..=w - cw),
                place_y: rng.random_range(0..=h - ch),
            }
        }
        AugmentKind::Translate => {
            let (mx, my) = ((w / 4) as i64, (h / 4) as i64);
            AugmentOp::Translate { dx: rng.random_range(-mx..=mx), dy: rng.random_range(-my..=my) }
        }
        AugmentKind::Hflip => AugmentOp::Hflip,
        AugmentKind::RotateSmall => AugmentOp::RotateSmall { degrees: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG) },
        AugmentKind::SuperimposeNoise => {
            let donor = donor?;
            if donor.noise.is_empty() {
                return None;
            }
            let b = donor.noise[rng.random_range(0..donor.noise.len())];
            let (bw, bh) = box_extent(&b);
            if bw > w || bh > h {
                return None;
            }
            AugmentOp::SuperimposeNoise { donor_box: b, place_x: rng.random_range(0..=w - bw), place_y: rng.random_range(0..=h - bh) }
        }
    })
}

/// Median over the per-frame channel medians.
pub fn background_median(samples: &[LabeledSample]) -> [u8; 3] {
    if samples.is_empty() {
        return [0, 0, 0];
    }
    let meds: Vec<[u8; 3]> = samples.iter().map(|s| s.image.pixels.channel_median()).collect();
    let mut out = [0u8; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let mut v: Vec<u8> = meds.iter().map(|m| m[ch]).collect();
        v.sort_unstable();
        *o = v[(v.len() - 1) / 2];
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSettings {
    pub background: [u8; 3],
    pub fish_radius: f64,
}

impl AugmentSettings {
    pub fn for_samples(samples: &[LabeledSample]) -> Self {
        let w = samples.first().map_or(576, |s| s.image.width());
        AugmentSettings { background: background_median(samples), fish_radius: (w as f64 / 96.0).max(2.0) }
    }
}

/// Expands `train` to `target_n` samples. Originals come first, unmodified.
/// Each extra sample `i` derives its source, op kind and parameters from
/// `(seed, i)` alone. Kinds are uniform over all five; when
/// `SuperimposeNoise` is drawn but no frame carries a noise box, the kind is
/// redrawn from the remaining four.
pub fn augment_dataset(train: &[LabeledSample], target_n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    augment_dataset_with(train, target_n, seed, AugmentSettings::for_samples(train))
}

/// One synthesized sample: source index, op and donor index.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedOp {
    pub source: usize,
    pub op: AugmentOp,
    pub donor: Option<usize>,
}

/// The ops [`augment_dataset`] applies to produce samples
/// `train.len()..target_n`, in order.
pub fn augment_plan(train: &[LabeledSample], target_n: usize, seed: u64) -> Vec<PlannedOp> {
    if train.is_empty() || target_n <= train.len() {
        return Vec::new();
    }
    let donors: Vec<usize> = (0..train.len()).filter(|&i| !train[i].noise.is_empty()).collect();
    par::map_indices(target_n - train.len(), |j| {
        let i = train.len() + j;
        let mut rng = seed::rng(seed, "augment", i as u64);
        let source = rng.random_range(0..train.len());
        let (h, w) = (train[source].image.height(), train[source].image.width());
        let mut kind = AugmentKind::ALL[rng.random_range(0..5)];
        let donor = (!donors.is_empty()).then(|| donors[rng.random_range(0..donors.len())]);
        let op = loop {
            match sample_op(kind, h, w, donor.map(|d| &train[d]), &mut rng) {
                Some(op) => break op,
                None => kind = AugmentKind::ALL[rng.random_range(0..4)],
            }
        };
        PlannedOp { source, op, donor }
    })
}

pub fn augment_dataset_with(train: &[LabeledSample], target_n: usize, seed: u64, settings: AugmentSettings) -> Result<Vec<LabeledSample>> {
    if target_n < train.len() {
        return Err(Error::Config(format!("augment target {target_n} below training size {}", train.len())));
    }
    if train.is_empty() {
        return if target_n == 0 { Ok(Vec::new()) } else { Err(Error::Config("nothing to augment".into())) };
    }
    let plan = augment_plan(train, target_n, seed);
    let extra = par::map_indices(plan.len(), |j| {
        let i = train.len() + j;
        let PlannedOp { source, op, donor } = &plan[j];
        let src = &train[*source];
        let ctx = AugmentContext { background: settings.background, donor: donor.map(|d| &train[d]), fish_radius: settings.fish_radius };
        let mut out = apply(src, op, &ctx)?;
        out.image.meta = ImageMeta { meters_per_pixel: src.image.meta.meters_per_pixel, source_id: format!("{}_aug{i:05}", src.id()) };
        Ok(out)
    });
    let mut all = train.to_vec();
    for s in extra {
        all.push(s?);
    }
    Ok(all)
}
