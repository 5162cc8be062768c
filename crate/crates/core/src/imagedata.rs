//! Images, point/box annotations, VIA ingestion, geographic cropping,
//! bilinear resizing, stratified dataset splits and the on-disk layout.
//!
//! Coordinates are continuous: pixel `(row, col)` covers `[col, col+1) x
//! [row, row+1)`, so a point at `(x, y)` lies in pixel `(floor(y), floor(x))`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::seed;

/// Interleaved 8-bit RGB pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        assert!(height >= 1 && width >= 1, "image dimensions must be positive");
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        RgbImage { height, width, data }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Shape {
                expected: format!("{height}x{width}x3 nonempty"),
                actual: format!("{} bytes", data.len()),
            });
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies a `h x w` block starting at `(row, col)`. The block must fit.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> RgbImage {
        assert!(row + h <= self.height && col + w <= self.width && h > 0 && w > 0);
        let mut data = Vec::with_capacity(h * w * 3);
        for r in row..row + h {
            let start = (r * self.width + col) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        RgbImage { height: h, width: w, data }
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r, c, self.get(r, self.width - 1 - c));
            }
        }
        out
    }

    /// Pastes `src` with its top-left corner at `(row, col)`, clipping at the
    /// borders. Negative offsets are allowed.
    pub fn paste(&mut self, src: &RgbImage, row: i64, col: i64) {
        for r in 0..src.height {
            let tr = row + r as i64;
            if tr < 0 || tr >= self.height as i64 {
                continue;
            }
            for c in 0..src.width {
                let tc = col + c as i64;
                if tc < 0 || tc >= self.width as i64 {
                    continue;
                }
                self.set(tr as usize, tc as usize, src.get(r, c));
            }
        }
    }

    /// Per-channel median over all pixels.
    pub fn channel_median(&self) -> [u8; 3] {
        let mut hist = [[0usize; 256]; 3];
        for px in self.data.chunks_exact(3) {
            for ch in 0..3 {
                hist[ch][px[ch] as usize] += 1;
            }
        }
        let half = (self.height * self.width).div_ceil(2);
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let mut acc = 0;
            for (v, &n) in hist[ch].iter().enumerate() {
                acc += n;
                if acc >= half {
                    out[ch] = v as u8;
                    break;
                }
            }
        }
        out
    }

    pub fn read_png(path: &Path) -> Result<RgbImage> {
        let img = image::open(path)
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        RgbImage::from_raw(h as usize, w as usize, img.into_raw())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer size matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub meters_per_pixel: f64,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub pixels: RgbImage,
    pub meta: ImageMeta,
}

impl RawImage {
    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub x: f64,
    pub y: f64,
}

impl PointAnnotation {
    pub fn new(x: f64, y: f64) -> Self {
        PointAnnotation { x, y }
    }

    /// Closed lower bound, open upper bound.
    pub fn inside(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
        self.x >= x0 && self.x < x1 && self.y >= y0 && self.y < y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Dolphin,
    Net,
    Other,
}

impl NoiseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::Dolphin => "dolphin",
            NoiseKind::Net => "net",
            NoiseKind::Other => "other",
        }
    }

    fn parse(s: &str) -> NoiseKind {
        match s.to_ascii_lowercase().as_str() {
            "dolphin" => NoiseKind::Dolphin,
            "net" => NoiseKind::Net,
            _ => NoiseKind::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub kind: NoiseKind,
}

impl NoiseBox {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    /// Intersection with a rectangle, or `None` when it is empty.
    pub fn clip(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> Option<NoiseBox> {
        let b = NoiseBox {
            x0: self.x0.max(x0),
            y0: self.y0.max(y0),
            x1: self.x1.min(x1),
            y1: self.y1.min(y1),
            kind: self.kind,
        };
        (b.x0 < b.x1 && b.y0 < b.y1).then_some(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: RawImage,
    pub points: Vec<PointAnnotation>,
    pub noise: Vec<NoiseBox>,
}

impl LabeledSample {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn id(&self) -> &str {
        &self.image.meta.source_id
    }

    /// Checks that every annotation lies inside the image.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image.width() as f64, self.image.height() as f64);
        for (i, p) in self.points.iter().enumerate() {
            if !p.inside(0.0, 0.0, w, h) {
                return Err(Error::AnnotationRegion {
                    index: i,
                    message: format!("point ({}, {}) outside {w}x{h} image", p.x, p.y),
                });
            }
        }
        for (i, b) in self.noise.iter().enumerate() {
            check_box(b, w, h).map_err(|message| Error::AnnotationRegion { index: i, message })?;
        }
        Ok(())
    }
}

fn check_box(b: &NoiseBox, w: f64, h: f64) -> std::result::Result<(), String> {
    if !(b.x0 < b.x1 && b.y0 < b.y1) {
        return Err(format!("degenerate rectangle ({}, {}, {}, {})", b.x0, b.y0, b.x1, b.y1));
    }
    if b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > w || b.y1 > h {
        return Err(format!(
            "rectangle ({}, {}, {}, {}) outside {w}x{h} image",
            b.x0, b.y0, b.x1, b.y1
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// VIA annotation documents

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

fn number(v: &Value, key: &str, index: usize) -> Result<f64> {
    v.get(key).and_then(Value::as_f64).ok_or_else(|| Error::AnnotationRegion {
        index,
        message: format!("missing numeric field `{key}`"),
    })
}

/// Locates the `regions` array: either the document is a single VIA file
/// entry, or a VIA project map keyed by `filename + size`, in which case the
/// entry whose filename matches the image id (or the sole entry) is used.
fn find_regions<'a>(doc: &'a Value, source_id: &str) -> Result<&'a Vec<Value>> {
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::AnnotationDocument("top level must be an object".into()))?;
    let entry = if obj.contains_key("regions") {
        doc
    } else {
        let stem = |f: &str| f.rsplit_once('.').map_or(f.to_string(), |(s, _)| s.to_string());
        let matching: Vec<&Value> = obj
            .values()
            .filter(|e| {
                e.get("filename")
                    .and_then(Value::as_str)
                    .is_some_and(|f| f == source_id || stem(f) == source_id)
            })
            .collect();
        match (matching.len(), obj.len()) {
            (1, _) => matching[0],
            (0, 1) => obj.values().next().unwrap(),
            (0, _) => {
                return Err(Error::AnnotationDocument(format!("no entry for image `{source_id}`")))
            }
            _ => {
                return Err(Error::AnnotationDocument(format!(
                    "several entries for image `{source_id}`"
                )))
            }
        }
    };
    match entry.get("regions") {
        Some(Value::Array(regions)) => Ok(regions),
        // VIA 1.x wrote regions as an object keyed by index.
        Some(Value::Object(_)) => Err(Error::AnnotationDocument(
            "`regions` must be an array (VIA 2 export)".into(),
        )),
        _ => Err(Error::AnnotationDocument("missing `regions` array".into())),
    }
}

/// Parses a VIA export (point and rect regions only) for one image.
pub fn parse_annotations(document: &str, image: RawImage) -> Result<LabeledSample> {
    let doc: Value = serde_json::from_str(document).map_err(|e| Error::AnnotationSyntax {
        offset: byte_offset(document, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let regions = find_regions(&doc, &image.meta.source_id)?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut points = Vec::new();
    let mut noise = Vec::new();
    for (index, region) in regions.iter().enumerate() {
        let shape = region.get("shape_attributes").ok_or_else(|| Error::AnnotationRegion {
            index,
            message: "missing `shape_attributes`".into(),
        })?;
        match shape.get("name").and_then(Value::as_str) {
            Some("point") => {
                let p = PointAnnotation::new(number(shape, "cx", index)?, number(shape, "cy", index)?);
                if !p.inside(0.0, 0.0, w, h) {
                    return Err(Error::AnnotationRegion {
                        index,
                        message: format!("point ({}, {}) outside {w}x{h} image", p.x, p.y),
                    });
                }
                points.push(p);
            }
            Some("rect") => {
                let x = number(shape, "x", index)?;
                let y = number(shape, "y", index)?;
                let kind = region
                    .get("region_attributes")
                    .and_then(|a| a.get("noise").or_else(|| a.get("type")))
                    .and_then(Value::as_str)
                    .map_or(NoiseKind::Other, NoiseKind::parse);
                let b = NoiseBox {
                    x0: x,
                    y0: y,
                    x1: x + number(shape, "width", index)?,
                    y1: y + number(shape, "height", index)?,
                    kind,
                };
                check_box(&b, w, h).map_err(|message| Error::AnnotationRegion { index, message })?;
                noise.push(b);
            }
            Some(other) => {
                return Err(Error::AnnotationRegion {
                    index,
                    message: format!("unsupported region shape `{other}` (only point and rect)"),
                })
            }
            None => {
                return Err(Error::AnnotationRegion {
                    index,
                    message: "missing shape name".into(),
                })
            }
        }
    }
    Ok(LabeledSample { image, points, noise })
}

/// Serializes annotations as a single VIA file entry. Points come first,
/// then rectangles.
pub fn to_via_json(sample: &LabeledSample) -> String {
    let mut regions: Vec<Value> = sample
        .points
        .iter()
        .map(|p| {
            json!({
                "shape_attributes": {"name": "point", "cx": p.x, "cy": p.y},
                "region_attributes": {}
            })
        })
        .collect();
    regions.extend(sample.noise.iter().map(|b| {
        json!({
            "shape_attributes": {
                "name": "rect", "x": b.x0, "y": b.y0,
                "width": b.x1 - b.x0, "height": b.y1 - b.y0
            },
            "region_attributes": {"noise": b.kind.as_str()}
        })
    }));
    let doc = json!({
        "filename": format!("{}.png", sample.id()),
        "size": -1,
        "regions": regions,
        "file_attributes": {}
    });
    serde_json::to_string_pretty(&doc).expect("annotation JSON serializes")
}

// ---------------------------------------------------------------------------
// Geometry

/// Crops the physical window `area_w_m x area_h_m` anchored at the top-left
/// corner. Annotations outside the window are dropped; boxes are clipped.
pub fn crop_to_area(sample: &LabeledSample, area_w_m: f64, area_h_m: f64) -> Result<LabeledSample> {
    let mpp = sample.image.meta.meters_per_pixel;
    if !(mpp > 0.0) {
        return Err(Error::Config(format!("meters_per_pixel must be positive, got {mpp}")));
    }
    let (w, h) = (sample.image.width(), sample.image.height());
    let crop_w = (area_w_m / mpp).round() as usize;
    let crop_h = (area_h_m / mpp).round() as usize;
    if crop_w > w || crop_h > h || crop_w == 0 || crop_h == 0 {
        return Err(Error::CropExceedsExtent {
            requested_w_m: area_w_m,
            requested_h_m: area_h_m,
            available_w_m: w as f64 * mpp,
            available_h_m: h as f64 * mpp,
        });
    }
    let (cw, ch) = (crop_w as f64, crop_h as f64);
    Ok(LabeledSample {
        image: RawImage {
            pixels: sample.image.pixels.crop(0, 0, crop_h, crop_w),
            meta: sample.image.meta.clone(),
        },
        points: sample.points.iter().copied().filter(|p| p.inside(0.0, 0.0, cw, ch)).collect(),
        noise: sample.noise.iter().filter_map(|b| b.clip(0.0, 0.0, cw, ch)).collect(),
    })
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize_pixels(src: &RgbImage, target_h: usize, target_w: usize) -> RgbImage {
    assert!(target_h >= 1 && target_w >= 1);
    let (h, w) = (src.height(), src.width());
    if h == target_h && w == target_w {
        return src.clone();
    }
    let sy = h as f64 / target_h as f64;
    let sx = w as f64 / target_w as f64;
    let axis = |dst: usize, scale: f64, n: usize| {
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..target_w).map(|c| axis(c, sx, w)).collect();
    let mut out = RgbImage::filled(target_h, target_w, [0, 0, 0]);
    for r in 0..target_h {
        let (r0, r1, fy) = axis(r, sy, h);
        for (c, &(c0, c1, fx)) in cols.iter().enumerate() {
            let (a, b, cc, d) = (src.get(r0, c0), src.get(r0, c1), src.get(r1, c0), src.get(r1, c1));
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                let bottom = cc[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                px[ch] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.set(r, c, px);
        }
    }
    out
}

fn scale_coord(v: f64, factor: f64, limit: f64) -> f64 {
    let s = v * factor;
    if s < limit {
        s
    } else {
        // Rounding can land exactly on the open upper bound.
        limit - limit * f64::EPSILON
    }
}

/// Resizes the image and scales every annotation by the same factors.
pub fn resize_bilinear(sample: &LabeledSample, target_h: usize, target_w: usize) -> Result<LabeledSample> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Config("resize target must be at least 1x1".into()));
    }
    let fx = target_w as f64 / sample.image.width() as f64;
    let fy = target_h as f64 / sample.image.height() as f64;
    let (tw, th) = (target_w as f64, target_h as f64);
    Ok(LabeledSample {
        image: RawImage {
            pixels: resize_pixels(&sample.image.pixels, target_h, target_w),
            meta: ImageMeta {
                meters_per_pixel: sample.image.meta.meters_per_pixel / fx.min(fy),
                source_id: sample.image.meta.source_id.clone(),
            },
        },
        points: sample
            .points
            .iter()
            .map(|p| PointAnnotation::new(scale_coord(p.x, fx, tw), scale_coord(p.y, fy, th)))
            .collect(),
        noise: sample
            .noise
            .iter()
            .map(|b| NoiseBox {
                x0: b.x0 * fx,
                y0: b.y0 * fy,
                x1: (b.x1 * fx).min(tw),
                y1: (b.y1 * fy).min(th),
                kind: b.kind,
            })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 350.0, val: 70.0, test: 80.0 }
    }
}

impl SplitRatios {
    /// Split sizes: train rounds to nearest, val floors, test takes the rest.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        let total = self.train + self.val + self.test;
        if !(self.train >= 0.0 && self.val >= 0.0 && self.test >= 0.0 && total > 0.0) {
            return Err(Error::Split(format!("invalid ratios {self:?}")));
        }
        let n_train = ((n as f64 * self.train / total).round() as usize).min(n);
        let n_val = ((n as f64 * self.val / total + 1e-9).floor() as usize).min(n - n_train);
        let n_test = n - n_train - n_val;
        let want = [self.train, self.val, self.test];
        let got = [n_train, n_val, n_test];
        if n < 3 || want.iter().zip(got).any(|(&r, g)| r > 0.0 && g == 0) {
            return Err(Error::Split(format!(
                "{n} samples cannot satisfy ratios {}:{}:{}",
                self.train, self.val, self.test
            )));
        }
        Ok((n_train, n_val, n_test))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Stratified shuffle split. Ids are shuffled within each stratum, strata
/// are laid end to end, and positions are dealt to the three partitions by
/// largest running deficit, which hits the exact target sizes while giving
/// each stratum a share within one sample of proportional.
pub fn split_dataset(ids: &[String], strata: &[u32], ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    if strata.len() != ids.len() {
        return Err(Error::Split("one stratum label per id required".into()));
    }
    let n = ids.len();
    let (n_train, n_val, n_test) = ratios.sizes(n)?;
    let mut classes: Vec<u32> = strata.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut ordered = Vec::with_capacity(n);
    for &class in &classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| strata[i] == class).collect();
        members.shuffle(&mut seed::rng(seed, "split", class as u64));
        ordered.extend(members);
    }
    let targets = [n_train, n_val, n_test];
    let mut assigned = [0usize; 3];
    let mut parts: [Vec<String>; 3] = Default::default();
    for (pos, &idx) in ordered.iter().enumerate() {
        let mut best = None;
        let mut best_deficit = f64::NEG_INFINITY;
        for s in 0..3 {
            if assigned[s] >= targets[s] {
                continue;
            }
            let deficit = targets[s] as f64 * (pos + 1) as f64 / n as f64 - assigned[s] as f64;
            if deficit > best_deficit + 1e-12 {
                best_deficit = deficit;
                best = Some(s);
            }
        }
        let s = best.expect("targets sum to n");
        assigned[s] += 1;
        parts[s].push(ids[idx].clone());
    }
    let [train, val, test] = parts;
    Ok(DatasetSplit { train, val, test, seed })
}

// ---------------------------------------------------------------------------
// Dataset directory layout:
//   images/<id>.png, images/<id>.meta.json, annotations/<id>.json,
//   splits/<seed>.json

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

pub fn meta_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.meta.json"))
}

pub fn annotation_path(root: &Path, id: &str) -> PathBuf {
    root.join("annotations").join(format!("{id}.json"))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_image(root: &Path, image: &RawImage) -> Result<()> {
    create_dir(&root.join("images"))?;
    let id = &image.meta.source_id;
    image.pixels.write_png(&image_path(root, id))?;
    let meta = serde_json::to_string_pretty(&image.meta).expect("meta serializes");
    write_text(&meta_path(root, id), &meta)
}

pub fn read_image(root: &Path, id: &str) -> Result<RawImage> {
    let pixels = RgbImage::read_png(&image_path(root, id))?;
    let mp = meta_path(root, id);
    let meta = if mp.exists() {
        serde_json::from_str(&read_text(&mp)?).map_err(|e| Error::json(&mp, e))?
    } else {
        ImageMeta { meters_per_pixel: 1.0, source_id: id.to_string() }
    };
    Ok(RawImage { pixels, meta })
}

pub fn write_sample(root: &Path, sample: &LabeledSample) -> Result<()> {
    write_image(root, &sample.image)?;
    create_dir(&root.join("annotations"))?;
    write_text(&annotation_path(root, sample.id()), &to_via_json(sample))
}

pub fn read_sample(root: &Path, id: &str) -> Result<LabeledSample> {
    let image = read_image(root, id)?;
    let ap = annotation_path(root, id);
    parse_annotations(&read_text(&ap)?, image)
}

/// Ids of every `images/*.png`, sorted.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("images");
    let mut ids: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".png").map(str::to_string)
        })
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn read_samples(root: &Path, ids: &[String]) -> Result<Vec<LabeledSample>> {
    ids.iter().map(|id| read_sample(root, id)).collect()
}

pub fn split_path(root: &Path, seed: u64) -> PathBuf {
    root.join("splits").join(format!("{seed}.json"))
}

pub fn write_split(root: &Path, split: &DatasetSplit) -> Result<()> {
    create_dir(&root.join("splits"))?;
    let text = serde_json::to_string_pretty(split).expect("split serializes");
    write_text(&split_path(root, split.seed), &text)
}

pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blank(h: usize, w: usize, mpp: f64) -> RawImage {
        RawImage {
            pixels: RgbImage::filled(h, w, [10, 20, 30]),
            meta: ImageMeta { meters_per_pixel: mpp, source_id: "frame".into() },
        }
    }

    fn point_region(x: f64, y: f64) -> String {
        format!(r#"{{"shape_attributes":{{"name":"point","cx":{x},"cy":{y}}},"region_attributes":{{}}}}"#)
    }

    #[test]
    fn parses_points_only() {
        let regions = [point_region(1.0, 2.0), point_region(3.0, 4.0), point_region(5.0, 6.0)].join(",");
        let doc = format!(r#"{{"filename":"frame.png","regions":[{regions}]}}"#);
        let s = parse_annotations(&doc, blank(64, 64, 1.0)).unwrap();
        assert_eq!(s.count(), 3);
        assert!(s.noise.is_empty());
    }

    #[test]
    fn parses_empty_regions() {
        let s = parse_annotations(r#"{"regions":[]}"#, blank(8, 8, 1.0)).unwrap();
        assert_eq!(s.count(), 0);
        assert!(s.noise.is_empty());
    }

    #[test]
    fn parses_point_and_rect_from_project_map() {
        let doc = r#"{
          "frame.png1234": {
            "filename": "frame.png", "size": 1234,
            "regions": [
              {"shape_attributes": {"name": "point", "cx": 10.5, "cy": 20.0}, "region_attributes": {}},
              {"shape_attributes": {"name": "rect", "x": 0, "y": 0, "width": 50, "height": 50},
               "region_attributes": {"noise": "dolphin"}}
            ],
            "file_attributes": {}
          }
        }"#;
        let s = parse_annotations(doc, blank(100, 100, 1.0)).unwrap();
        assert_eq!(s.points, vec![PointAnnotation::new(10.5, 20.0)]);
        assert_eq!(
            s.noise,
            vec![NoiseBox { x0: 0.0, y0: 0.0, x1: 50.0, y1: 50.0, kind: NoiseKind::Dolphin }]
        );
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let doc = "{\"regions\": [\n  {\"shape_attributes\": }\n]}";
        match parse_annotations(doc, blank(8, 8, 1.0)) {
            Err(Error::AnnotationSyntax { offset, .. }) => {
                assert_eq!(&doc[offset..offset + 1], "}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_point_names_region() {
        let doc = format!(r#"{{"regions":[{},{}]}}"#, point_region(1.0, 1.0), point_region(8.0, 1.0));
        match parse_annotations(&doc, blank(8, 8, 1.0)) {
            Err(Error::AnnotationRegion { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn other_shapes_are_rejected() {
        let doc = r#"{"regions":[{"shape_attributes":{"name":"polygon","all_points_x":[1],"all_points_y":[1]}}]}"#;
        assert!(matches!(
            parse_annotations(doc, blank(8, 8, 1.0)),
            Err(Error::AnnotationRegion { index: 0, .. })
        ));
    }

    #[test]
    fn crop_size_follows_meters_per_pixel() {
        let img = blank(400, 700, 0.0125);
        let s = LabeledSample { image: img, points: vec![], noise: vec![] };
        let c = crop_to_area(&s, 8.5, 4.0).unwrap();
        assert_eq!((c.image.height(), c.image.width()), (320, 680));
    }

    #[test]
    fn full_crop_is_identity() {
        let s = LabeledSample {
            image: blank(40, 80, 0.1),
            points: vec![PointAnnotation::new(79.9, 39.9), PointAnnotation::new(0.0, 0.0)],
            noise: vec![NoiseBox { x0: 1.0, y0: 1.0, x1: 5.0, y1: 5.0, kind: NoiseKind::Net }],
        };
        assert_eq!(crop_to_area(&s, 8.0, 4.0).unwrap(), s);
    }

    #[test]
    fn crop_drops_points_outside_window() {
        let s = LabeledSample {
            image: blank(40, 80, 0.1),
            points: vec![PointAnnotation::new(10.0, 10.0), PointAnnotation::new(50.0, 10.0)],
            noise: vec![],
        };
        let c = crop_to_area(&s, 4.0, 4.0).unwrap();
        assert_eq!(c.count(), 1);
    }

    #[test]
    fn crop_larger_than_image_reports_extent() {
        let s = LabeledSample { image: blank(40, 80, 0.1), points: vec![], noise: vec![] };
        match crop_to_area(&s, 9.0, 4.0) {
            Err(Error::CropExceedsExtent { available_w_m, available_h_m, .. }) => {
                assert!((available_w_m - 8.0).abs() < 1e-9 && (available_h_m - 4.0).abs() < 1e-9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let mut px = RgbImage::filled(5, 7, [0, 0, 0]);
        px.set(2, 3, [200, 100, 50]);
        assert_eq!(resize_pixels(&px, 5, 7), px);
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let px = RgbImage::filled(9, 13, [17, 99, 250]);
        assert_eq!(resize_pixels(&px, 4, 29), RgbImage::filled(4, 29, [17, 99, 250]));
    }

    /// Scalar reference: explicit tap weights on a single channel.
    fn reference_bilinear(src: &[[f64; 4]; 4], out_h: usize, out_w: usize) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; out_w]; out_h];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let sy = ((i as f64 + 0.5) * 4.0 / out_h as f64 - 0.5).max(0.0).min(3.0);
                let sx = ((j as f64 + 0.5) * 4.0 / out_w as f64 - 0.5).max(0.0).min(3.0);
                let mut acc = 0.0;
                for (r, src_row) in src.iter().enumerate() {
                    for (c, &s) in src_row.iter().enumerate() {
                        let wy = (1.0 - (sy - r as f64).abs()).max(0.0);
                        let wx = (1.0 - (sx - c as f64).abs()).max(0.0);
                        acc += wy * wx * s;
                    }
                }
                *v = acc;
            }
        }
        out
    }

    #[test]
    fn checker_downsample_matches_reference() {
        let mut grid = [[0.0; 4]; 4];
        let mut px = RgbImage::filled(4, 4, [0, 0, 0]);
        for r in 0..4 {
            for c in 0..4 {
                let v = if (r + c) % 2 == 0 { 255u8 } else { 0 };
                grid[r][c] = v as f64;
                px.set(r, c, [v, v, v]);
            }
        }
        let expected = reference_bilinear(&grid, 2, 2);
        let got = resize_pixels(&px, 2, 2);
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(got.get(r, c)[0], expected[r][c].round() as u8);
            }
        }
    }

    #[test]
    fn split_of_five_hundred_uses_holdout_sizes() {
        let ids: Vec<String> = (0..500).map(|i| format!("s{i}")).collect();
        let strata: Vec<u32> = (0..500).map(|i| (i % 7 == 0) as u32 + (i % 19 == 0) as u32).collect();
        let split = split_dataset(&ids, &strata, SplitRatios::default(), 3).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (350, 70, 80));
        assert_eq!(split, split_dataset(&ids, &strata, SplitRatios::default(), 3).unwrap());
    }

    #[test]
    fn split_rounding_rule() {
        let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let ratios = SplitRatios { train: 0.7, val: 0.15, test: 0.15 };
        let split = split_dataset(&ids, &[0; 10], ratios, 1).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (7, 1, 2));
    }

    #[test]
    fn split_rejects_too_few_samples() {
        let ids: Vec<String> = (0..2).map(|i| i.to_string()).collect();
        assert!(split_dataset(&ids, &[0, 0], SplitRatios::default(), 1).is_err());
    }

    #[test]
    fn split_is_stratified() {
        let ids: Vec<String> = (0..500).map(|i| i.to_string()).collect();
        let strata: Vec<u32> = (0..500).map(|i| if i < 375 { 1 } else if i < 465 { 2 } else { 3 }).collect();
        let split = split_dataset(&ids, &strata, SplitRatios::default(), 11).unwrap();
        let share = |part: &[String], class: u32| {
            part.iter().filter(|id| strata[id.parse::<usize>().unwrap()] == class).count() as f64
                / part.len() as f64
        };
        for class in 1..=3 {
            assert!((share(&split.train, class) - share(&split.test, class)).abs() <= 0.03);
        }
    }

    proptest! {
        #[test]
        fn split_is_disjoint_and_exhaustive(n in 3usize..200, seed in any::<u64>(), k in 1u32..4) {
            let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
            let strata: Vec<u32> = (0..n).map(|i| (i as u32 * 7919) % k).collect();
            let ratios = SplitRatios { train: 1.0, val: 1.0, test: 1.0 };
            let split = split_dataset(&ids, &strata, ratios, seed).unwrap();
            let mut all: Vec<String> =
                split.train.iter().chain(&split.val).chain(&split.test).cloned().collect();
            all.sort();
            let mut expected = ids.clone();
            expected.sort();
            prop_assert_eq!(all, expected);
        }

        #[test]
        fn resize_preserves_point_count(
            th in 1usize..50, tw in 1usize..50,
            pts in proptest::collection::vec((0.0f64..31.999, 0.0f64..15.999), 0..20)
        ) {
            let s = LabeledSample {
                image: blank(16, 32, 1.0),
                points: pts.iter().map(|&(x, y)| PointAnnotation::new(x, y)).collect(),
                noise: vec![],
            };
            let r = resize_bilinear(&s, th, tw).unwrap();
            prop_assert_eq!(r.count(), s.count());
            prop_assert!(r.validate().is_ok());
        }

        #[test]
        fn crop_count_matches_brute_force(
            pts in proptest::collection::vec((0.0f64..80.0, 0.0f64..40.0), 0..40),
            aw in 0.5f64..8.0, ah in 0.5f64..4.0
        ) {
            let s = LabeledSample {
                image: blank(40, 80, 0.1),
                points: pts.iter().map(|&(x, y)| PointAnnotation::new(x, y)).collect(),
                noise: vec![],
            };
            let c = crop_to_area(&s, aw, ah).unwrap();
            let (cw, ch) = ((aw / 0.1).round(), (ah / 0.1).round());
            let brute = pts.iter().filter(|&&(x, y)| x < cw && y < ch).count();
            prop_assert_eq!(c.count(), brute);
        }

        #[test]
        fn via_roundtrip(
            pts in proptest::collection::vec((0.0f64..64.0, 0.0f64..32.0), 0..10),
            boxes in proptest::collection::vec((0.0f64..30.0, 0.0f64..15.0, 1.0f64..30.0, 1.0f64..15.0), 0..4)
        ) {
            let s = LabeledSample {
                image: blank(32, 64, 1.0),
                points: pts.iter().map(|&(x, y)| PointAnnotation::new(x, y)).collect(),
                noise: boxes
                    .iter()
                    .map(|&(x, y, w, h)| NoiseBox { x0: x, y0: y, x1: x + w, y1: y + h, kind: NoiseKind::Net })
                    .collect(),
            };
            let text = to_via_json(&s);
            let back = parse_annotations(&text, s.image.clone()).unwrap();
            let again = parse_annotations(&to_via_json(&back), s.image.clone()).unwrap();
            prop_assert_eq!(back.points.len(), s.points.len());
            prop_assert_eq!(&back.points, &again.points);
            prop_assert_eq!(back.noise.len(), again.noise.len());
            for (a, b) in back.noise.iter().zip(&again.noise) {
                prop_assert!((a.x1 - b.x1).abs() < 1e-9 && (a.y1 - b.y1).abs() < 1e-9);
                prop_assert_eq!(a.kind, b.kind);
            }
            for (a, b) in back.points.iter().zip(&s.points) {
                prop_assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
            }
        }
    }
}
