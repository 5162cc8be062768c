//! Ranked pairs of unlabelled frames.
//!
//! For each frame and crop factor `f` in {0.25, 0.5, 0.75}, the region
//! `(x1, y1 + f*h, x2 - f*w, y2)` is cut out, optionally mirrored, and placed
//! on a blank frame-sized canvas at a random offset `(l, u)` with
//! `l <= f*w`, `u <= f*h`. The list `[I, I_0.25, I_0.5, I_0.75]` is nested,
//! so every later element holds a subset of the fish of every earlier one,
//! and each ordered pair `(S_j, S_k)` with `k > j` is a ranked pair. Because
//! the rectangle only loses area from the top and the right, crops are
//! biased toward the bottom-left of the frame.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagedata::{PointAnnotation, RawImage, RgbImage};
use crate::seed;

pub const CROP_FACTORS: [f64; 3] = [0.25, 0.5, 0.75];

/// Number of ordered pairs drawn from one four-element list.
pub const PAIRS_PER_SOURCE: usize = 6;

/// Geometry of one cropped-and-shifted subregion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubregionSpec {
    pub factor: f64,
    /// Crop rectangle in source pixels: left, top, width, height.
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop_w: usize,
    pub crop_h: usize,
    /// Top-left placement on the canvas.
    pub offset_x: usize,
    pub offset_y: usize,
    pub flipped: bool,
}

impl SubregionSpec {
    pub fn new(factor: f64, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let cut_w = (factor * w as f64).floor() as usize;
        let cut_h = (factor * h as f64).floor() as usize;
        SubregionSpec {
            factor,
            crop_x: 0,
            crop_y: cut_h,
            crop_w: w - cut_w,
            crop_h: h - cut_h,
            offset_x: rng.random_range(0..=cut_w),
            offset_y: rng.random_range(0..=cut_h),
            flipped: rng.random_bool(0.5),
        }
    }

    /// Crop rectangle as `(x0, y0, x1, y1)`.
    pub fn rect(&self) -> (usize, usize, usize, usize) {
        (self.crop_x, self.crop_y, self.crop_x + self.crop_w, self.crop_y + self.crop_h)
    }

    pub fn contains(&self, p: &PointAnnotation) -> bool {
        let (x0, y0, x1, y1) = self.rect();
        p.inside(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
    }

    /// Position of a source point on the canvas, if it survives the crop.
    pub fn map_point(&self, p: &PointAnnotation) -> Option<PointAnnotation> {
        if !self.contains(p) {
            return None;
        }
        let mut x = p.x - self.crop_x as f64;
        if self.flipped {
            x = self.crop_w as f64 - x;
        }
        Some(PointAnnotation::new(x + self.offset_x as f64, p.y - self.crop_y as f64 + self.offset_y as f64))
    }

    pub fn render(&self, src: &RgbImage, background: [u8; 3]) -> RgbImage {
        let mut crop = src.crop(self.crop_y, self.crop_x, self.crop_h, self.crop_w);
        if self.flipped {
            crop = crop.flip_horizontal();
        }
        let mut canvas = RgbImage::filled(src.height(), src.width(), background);
        canvas.paste(&crop, self.offset_y as i64, self.offset_x as i64);
        canvas
    }
}

/// The three subregion specs of one frame; randomness is drawn once per
/// subregion, so every pair from this frame shares them.
pub fn subregion_specs(h: usize, w: usize, seed: u64, source_index: u64) -> [SubregionSpec; 3] {
    let mut rng = seed::rng(seed, "subregion", source_index);
    CROP_FACTORS.map(|f| SubregionSpec::new(f, h, w, &mut rng))
}

/// `S = [I, I_0.25, I_0.5, I_0.75]`.
pub fn subregions(image: &RgbImage, background: [u8; 3], seed: u64, source_index: u64) -> Vec<RgbImage> {
    let specs = subregion_specs(image.height(), image.width(), seed, source_index);
    std::iter::once(image.clone()).chain(specs.iter().map(|s| s.render(image, background))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedPair {
    pub source: usize,
    /// Index into `S`; 0 is the original frame.
    pub first: usize,
    pub second: usize,
}

/// Anything that can hand out the two images of pair `i`.
pub trait PairSource: Sync {
    fn len(&self) -> usize;
    fn pair(&self, i: usize) -> (RgbImage, RgbImage);
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Subsampled pairs over a set of unlabelled frames. Subregions are
/// rendered on demand from the stored geometry.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub sources: Vec<RawImage>,
    pub specs: Vec<[SubregionSpec; 3]>,
    pub pairs: Vec<RankedPair>,
    pub background: [u8; 3],
    pub seed: u64,
}

impl PairSet {
    pub fn spec(&self, source: usize, element: usize) -> Option<&SubregionSpec> {
        (element > 0).then(|| &self.specs[source][element - 1])
    }

    pub fn render(&self, source: usize, element: usize) -> RgbImage {
        let src = &self.sources[source].pixels;
        match self.spec(source, element) {
            None => src.clone(),
            Some(spec) => spec.render(src, self.background),
        }
    }

    /// Count of `points` that survive into element `element` of `source`.
    pub fn element_count(&self, source: usize, element: usize, points: &[PointAnnotation]) -> usize {
        match self.spec(source, element) {
            None => points.len(),
            Some(spec) => points.iter().filter(|p| spec.contains(p)).count(),
        }
    }
}

impl PairSource for PairSet {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn pair(&self, i: usize) -> (RgbImage, RgbImage) {
        let p = self.pairs[i];
        (self.render(p.source, p.first), self.render(p.source, p.second))
    }
}

/// Every ordered pair `(j, k)`, `k > j`, of a four-element list.
pub fn ordered_combinations() -> impl Iterator<Item = (usize, usize)> {
    (0..4).flat_map(|j| (j + 1..4).map(move |k| (j, k)))
}

/// Builds all `6 * |U|` ranked pairs and keeps a seeded subsample of
/// `n_pairs`.
pub fn generate_pairs(unlabelled: Vec<RawImage>, n_pairs: usize, background: [u8; 3], seed: u64) -> Result<PairSet> {
    let total = PAIRS_PER_SOURCE * unlabelled.len();
    if n_pairs > total {
        return Err(Error::Pairs(format!("{n_pairs} pairs requested but {} frames yield only {total}", unlabelled.len())));
    }
    let specs: Vec<[SubregionSpec; 3]> = unlabelled
        .iter()
        .enumerate()
        .map(|(i, img)| subregion_specs(img.height(), img.width(), seed, i as u64))
        .collect();
    let mut pairs: Vec<RankedPair> = (0..unlabelled.len())
        .flat_map(|source| ordered_combinations().map(move |(first, second)| RankedPair { source, first, second }))
        .collect();
    pairs.shuffle(&mut seed::rng(seed, "pairs", 0));
    pairs.truncate(n_pairs);
    Ok(PairSet { sources: unlabelled, specs, pairs, background, seed })
}

/// Pairs whose images are held in memory, e.g. loaded from a manifest.
#[derive(Debug, Clone, Default)]
pub struct LoadedPairs {
    pub images: Vec<RgbImage>,
    pub pairs: Vec<(usize, usize)>,
}

impl PairSource for LoadedPairs {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn pair(&self, i: usize) -> (RgbImage, RgbImage) {
        let (a, b) = self.pairs[i];
        (self.images[a].clone(), self.images[b].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagedata::ImageMeta;

    fn frame(h: usize, w: usize, id: &str) -> RawImage {
        RawImage { pixels: RgbImage::filled(h, w, [200, 200, 200]), meta: ImageMeta { meters_per_pixel: 1.0, source_id: id.into() } }
    }

    #[test]
    fn four_elements_per_frame() {
        assert_eq!(subregions(&frame(32, 64, "a").pixels, [0, 0, 0], 1, 0).len(), 4);
    }

    #[test]
    fn largest_factor_keeps_a_quarter_by_quarter_block() {
        let s = subregions(&frame(64, 128, "a").pixels, [0, 0, 0], 9, 0);
        let lit = (0..64).flat_map(|r| (0..128).map(move |c| (r, c))).filter(|&(r, c)| s[3].get(r, c) != [0, 0, 0]).count();
        assert_eq!(lit, 16 * 32);
    }

    #[test]
    fn one_frame_yields_six_pairs() {
        let set = generate_pairs(vec![frame(32, 32, "a")], 6, [0, 0, 0], 1).unwrap();
        let mut got: Vec<_> = set.pairs.iter().map(|p| (p.first, p.second)).collect();
        got.sort();
        assert_eq!(got, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn empty_pool_yields_no_pairs() {
        assert!(generate_pairs(vec![], 0, [0, 0, 0], 1).unwrap().pairs.is_empty());
    }

    #[test]
    fn too_many_pairs_is_an_error() {
        assert!(matches!(generate_pairs(vec![frame(32, 32, "a")], 7, [0, 0, 0], 1), Err(Error::Pairs(_))));
    }

    #[test]
    fn crops_are_nested() {
        for seed in 0..50 {
            let specs = subregion_specs(320, 576, seed, 3);
            for pair in specs.windows(2) {
                let (a, b) = (pair[0].rect(), pair[1].rect());
                assert!(b.0 >= a.0 && b.1 >= a.1 && b.2 <= a.2 && b.3 <= a.3);
            }
            for s in &specs {
                assert!(s.offset_x + s.crop_w <= 576 && s.offset_y + s.crop_h <= 320);
            }
        }
    }

    #[test]
    fn pairs_are_deterministic() {
        let frames: Vec<_> = (0..5).map(|i| frame(32, 64, &i.to_string())).collect();
        let a = generate_pairs(frames.clone(), 20, [0, 0, 0], 4).unwrap();
        let b = generate_pairs(frames, 20, [0, 0, 0], 4).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.specs, b.specs);
    }
}
