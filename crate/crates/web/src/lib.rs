//! WebAssembly bindings for the browser demo in `www/`.
//!
//! A [`Frame`] is one synthetic sonar image with its fish annotations. The
//! page asks it for three views: the frame itself, a density-map overlay
//! and the four ranked subregions used for self-supervised pairs.

use schoolcount::densitymap::{integrate_count, make_density, KernelSpec};
use schoolcount::evaluation::render_heatmap;
use schoolcount::imagedata::{LabeledSample, RgbImage};
use schoolcount::rankpairs::{subregion_specs, SubregionSpec};
use schoolcount::synthgen::{generate_sample, CountDistribution, SynthSpec};
use wasm_bindgen::prelude::*;

pub const HEIGHT: usize = 320;
pub const WIDTH: usize = 576;
const BACKGROUND: [u8; 3] = [0, 8, 70];

fn rgba(img: &RgbImage) -> Vec<u8> {
    img.as_raw().chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

#[wasm_bindgen]
pub struct Frame {
    sample: LabeledSample,
    specs: [SubregionSpec; 3],
}

#[wasm_bindgen]
impl Frame {
    /// Renders a frame with `count` fish (capped at 500). `noise` adds a
    /// dolphin or net; `speckle` is clamped to `[0, 1]`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, count: u32, noise: bool, speckle: f64) -> Frame {
        let spec = SynthSpec {
            count_distribution: CountDistribution::Fixed { n: count.min(500) },
            noise_rate: if noise { 1.0 } else { 0.0 },
            speckle_level: if speckle.is_finite() { speckle.clamp(0.0, 1.0) } else { 0.3 },
            image_size: (HEIGHT, WIDTH),
            seed: seed as u64,
            ..SynthSpec::default()
        };
        let sample = generate_sample(&spec, 0);
        let specs = subregion_specs(HEIGHT, WIDTH, seed as u64, 0);
        Frame { sample, specs }
    }

    pub fn width(&self) -> usize {
        WIDTH
    }

    pub fn height(&self) -> usize {
        HEIGHT
    }

    pub fn count(&self) -> usize {
        self.sample.count()
    }

    /// Frame pixels as RGBA, row-major.
    pub fn pixels(&self) -> Vec<u8> {
        rgba(&self.sample.image.pixels)
    }

    /// Annotations as `[x0, y0, x1, y1, ...]`.
    pub fn points(&self) -> Vec<f64> {
        self.sample.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    /// Noise boxes as `[x0, y0, x1, y1, ...]`.
    pub fn noise_boxes(&self) -> Vec<f64> {
        self.sample.noise.iter().flat_map(|b| [b.x0, b.y0, b.x1, b.y1]).collect()
    }

    /// Ground-truth density heat map at `stride` (8, 16 or 32; anything
    /// else falls back to 32), blended over the frame, as RGBA.
    pub fn density_overlay(&self, stride: usize) -> Vec<u8> {
        let stride = if matches!(stride, 8 | 16 | 32) { stride } else { 32 };
        let kernel = KernelSpec { stride, ..KernelSpec::default() };
        let map = make_density(&self.sample.points, HEIGHT, WIDTH, kernel).expect("stride divides the frame");
        rgba(&render_heatmap(&map, &self.sample.image.pixels))
    }

    /// Integral of the ground-truth density map.
    pub fn density_total(&self) -> f64 {
        let map = make_density(&self.sample.points, HEIGHT, WIDTH, KernelSpec::default()).expect("stride divides the frame");
        integrate_count(&map)
    }

    /// Element `k` of `[I, I_0.25, I_0.5, I_0.75]` as RGBA; `k > 3` is
    /// treated as 3.
    pub fn subregion(&self, k: usize) -> Vec<u8> {
        match k {
            0 => self.pixels(),
            k => rgba(&self.specs[k.min(3) - 1].render(&self.sample.image.pixels, BACKGROUND)),
        }
    }

    /// Fish that survive into element `k`.
    pub fn subregion_count(&self, k: usize) -> usize {
        match k {
            0 => self.count(),
            k => self.sample.points.iter().filter(|p| self.specs[k.min(3) - 1].contains(p)).count(),
        }
    }

    /// Fish positions inside element `k`, as `[x0, y0, ...]` canvas
    /// coordinates.
    pub fn subregion_points(&self, k: usize) -> Vec<f64> {
        match k {
            0 => self.points(),
            k => {
                let spec = &self.specs[k.min(3) - 1];
                self.sample.points.iter().filter_map(|p| spec.map_point(p)).flat_map(|p| [p.x, p.y]).collect()
            }
        }
    }
}
