//! Ground-truth density maps from point annotations, and their integral.
//!
//! Each point adds one Gaussian stamp of `size x size` taps on the integer
//! pixel grid, centered on the pixel that contains the point. Even sizes put
//! one more tap before the center than after it (`size = 4` spans offsets
//! `-2..=1`), so stamps carry a half-pixel bias up and to the left. Taps that
//! fall outside the image are discarded and the stamp is rescaled to sum to
//! exactly one. The full-resolution map is then block-summed by `stride`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::imagedata::PointAnnotation;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub size: usize,
    pub sigma: f64,
    pub stride: usize,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec { size: 4, sigma: 1.0, stride: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    stride: usize,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize, stride: usize) -> Self {
        DensityMap { height, width, stride, values: vec![0.0; height * width] }
    }

    pub fn from_values(height: usize, width: usize, stride: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape {
                expected: format!("{height}x{width} values"),
                actual: values.len().to_string(),
            });
        }
        Ok(DensityMap { height, width, stride, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.width + col] = v;
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Renormalized stamp taps for one point: `(row, col, weight)`.
pub fn stamp(point: &PointAnnotation, image_h: usize, image_w: usize, size: usize, sigma: f64) -> Vec<(usize, usize, f64)> {
    let cy = (point.y.floor() as i64).clamp(0, image_h as i64 - 1);
    let cx = (point.x.floor() as i64).clamp(0, image_w as i64 - 1);
    let lo = -((size / 2) as i64);
    let hi = lo + size as i64;
    let mut taps = Vec::with_capacity(size * size);
    let mut total = 0.0;
    for dy in lo..hi {
        let r = cy + dy;
        if r < 0 || r >= image_h as i64 {
            continue;
        }
        for dx in lo..hi {
            let c = cx + dx;
            if c < 0 || c >= image_w as i64 {
                continue;
            }
            let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            total += w;
            taps.push((r as usize, c as usize, w));
        }
    }
    for t in &mut taps {
        t.2 /= total;
    }
    taps
}

fn check(image_h: usize, image_w: usize, kernel: &KernelSpec) -> Result<()> {
    if kernel.size == 0 || !(kernel.sigma > 0.0) || kernel.stride == 0 {
        return Err(Error::Density(format!("invalid kernel {kernel:?}")));
    }
    if image_h == 0 || image_w == 0 || image_h % kernel.stride != 0 || image_w % kernel.stride != 0 {
        return Err(Error::Density(format!(
            "stride {} does not divide image {image_h}x{image_w}",
            kernel.stride
        )));
    }
    Ok(())
}

/// Builds the stride-level ground-truth map. Each full-resolution tap is
/// accumulated straight into its block, which equals block-summing the
/// full-resolution map.
pub fn make_density(points: &[PointAnnotation], image_h: usize, image_w: usize, kernel: KernelSpec) -> Result<DensityMap> {
    check(image_h, image_w, &kernel)?;
    let s = kernel.stride;
    let mut map = DensityMap::zeros(image_h / s, image_w / s, s);
    for p in points {
        for (r, c, w) in stamp(p, image_h, image_w, kernel.size, kernel.sigma) {
            map.values[(r / s) * map.width + c / s] += w;
        }
    }
    Ok(map)
}

/// Full-resolution map (stride 1), used for previews.
pub fn make_density_full(points: &[PointAnnotation], image_h: usize, image_w: usize, size: usize, sigma: f64) -> Result<DensityMap> {
    make_density(points, image_h, image_w, KernelSpec { size, sigma, stride: 1 })
}

/// Sum over every cell.
pub fn integrate_count(map: &DensityMap) -> f64 {
    map.values.iter().sum()
}

// Binary grid: magic "SCDM", u32 version, u32 height, u32 width, then
// height*width little-endian f32 values, row-major.
const MAGIC: &[u8; 4] = b"SCDM";
const VERSION: u32 = 1;

pub fn write_grid<W: Write>(map: &DensityMap, mut out: W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(map.height as u32).to_le_bytes())?;
    out.write_all(&(map.width as u32).to_le_bytes())?;
    for &v in &map.values {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_grid<R: Read>(mut input: R, stride: usize) -> Result<DensityMap> {
    let bad = |m: &str| Error::Density(format!("grid file: {m}"));
    let mut header = [0u8; 16];
    input.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    if &header[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    if word(4) != VERSION {
        return Err(bad(&format!("unsupported version {}", word(4))));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let mut raw = vec![0u8; h * w * 4];
    input.read_exact(&mut raw).map_err(|_| bad("truncated data"))?;
    let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    DensityMap::from_values(h, w, stride, values)
}

pub fn save_grid(map: &DensityMap, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_grid(map, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_grid(path: &Path, stride: usize) -> Result<DensityMap> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_grid(std::io::BufReader::new(file), stride)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Brute force: full-resolution map from explicit Gaussian stamps,
    /// written independently of `stamp`.
    fn brute_full(points: &[PointAnnotation], h: usize, w: usize) -> Vec<Vec<f64>> {
        let mut full = vec![vec![0.0; w]; h];
        for p in points {
            let (cy, cx) = (p.y.floor() as i64, p.x.floor() as i64);
            let mut cells = vec![];
            for r in 0..h as i64 {
                for c in 0..w as i64 {
                    let (dy, dx) = (r - cy, c - cx);
                    if (-2..=1).contains(&dy) && (-2..=1).contains(&dx) {
                        cells.push((r as usize, c as usize, (-((dx * dx + dy * dy) as f64) / 2.0).exp()));
                    }
                }
            }
            let z: f64 = cells.iter().map(|c| c.2).sum();
            for (r, c, v) in cells {
                full[r][c] += v / z;
            }
        }
        full
    }

    #[test]
    fn empty_points_give_zero_map() {
        let m = make_density(&[], 64, 96, KernelSpec::default()).unwrap();
        assert_eq!((m.height(), m.width()), (2, 3));
        assert_eq!(integrate_count(&m), 0.0);
    }

    #[test]
    fn single_interior_point_sums_to_one() {
        let m = make_density(&[PointAnnotation::new(40.3, 20.7)], 64, 64, KernelSpec::default()).unwrap();
        assert!((integrate_count(&m) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn seventeen_points_match_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut pts: Vec<PointAnnotation> =
            (0..15).map(|_| PointAnnotation::new(rng.random_range(0.0..96.0), rng.random_range(0.0..64.0))).collect();
        pts.push(PointAnnotation::new(0.0, 0.0));
        pts.push(PointAnnotation::new(95.9, 63.9));
        let full = brute_full(&pts, 64, 96);
        let brute_sum: f64 = full.iter().flatten().sum();
        assert!((brute_sum - 17.0).abs() < 1e-6);
        let m = make_density(&pts, 64, 96, KernelSpec::default()).unwrap();
        assert!((integrate_count(&m) - 17.0).abs() < 1e-6);
        for r in 0..2 {
            for c in 0..3 {
                let block: f64 = (0..32).flat_map(|i| (0..32).map(move |j| (i, j)))
                    .map(|(i, j)| full[r * 32 + i][c * 32 + j])
                    .sum();
                assert!((m.get(r, c) - block).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forty_two_points_integrate_to_42() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let pts: Vec<PointAnnotation> =
            (0..42).map(|_| PointAnnotation::new(rng.random_range(0.0..576.0), rng.random_range(0.0..320.0))).collect();
        let brute: f64 = brute_full(&pts, 320, 576).iter().flatten().sum();
        let m = make_density(&pts, 320, 576, KernelSpec::default()).unwrap();
        assert!((brute - 42.0).abs() < 1e-6);
        assert!((integrate_count(&m) - 42.0).abs() < 1e-6);
    }

    #[test]
    fn single_cell_integral() {
        let mut m = DensityMap::zeros(10, 18, 32);
        m.set(4, 7, 3.5);
        assert_eq!(integrate_count(&m), 3.5);
    }

    #[test]
    fn stride_must_divide_dimensions() {
        assert!(matches!(make_density(&[], 65, 64, KernelSpec::default()), Err(Error::Density(_))));
    }

    #[test]
    fn grid_file_roundtrip() {
        let pts = [PointAnnotation::new(3.0, 4.0), PointAnnotation::new(60.0, 10.0)];
        let m = make_density(&pts, 64, 64, KernelSpec::default()).unwrap();
        let mut buf = vec![];
        write_grid(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"SCDM");
        assert_eq!(buf.len(), 16 + 4 * 4);
        let back = read_grid(buf.as_slice(), 32).unwrap();
        for (a, b) in back.values().iter().zip(m.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    proptest! {
        #[test]
        fn translation_by_one_cell_shifts_map(
            pts in proptest::collection::vec((34.0f64..60.0, 34.0f64..60.0), 1..10)
        ) {
            let a: Vec<_> = pts.iter().map(|&(x, y)| PointAnnotation::new(x, y)).collect();
            let b: Vec<_> = pts.iter().map(|&(x, y)| PointAnnotation::new(x + 32.0, y)).collect();
            let ma = make_density(&a, 128, 128, KernelSpec::default()).unwrap();
            let mb = make_density(&b, 128, 128, KernelSpec::default()).unwrap();
            for r in 0..4 {
                for c in 0..3 {
                    prop_assert!((ma.get(r, c) - mb.get(r, c + 1)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn superposition(
            p in proptest::collection::vec((0.0f64..128.0, 0.0f64..64.0), 0..12),
            q in proptest::collection::vec((0.0f64..128.0, 0.0f64..64.0), 0..12)
        ) {
            let to = |v: &[(f64, f64)]| v.iter().map(|&(x, y)| PointAnnotation::new(x, y)).collect::<Vec<_>>();
            let (pp, qq) = (to(&p), to(&q));
            let all: Vec<_> = pp.iter().chain(&qq).copied().collect();
            let m = make_density(&all, 64, 128, KernelSpec::default()).unwrap();
            let mp = make_density(&pp, 64, 128, KernelSpec::default()).unwrap();
            let mq = make_density(&qq, 64, 128, KernelSpec::default()).unwrap();
            for i in 0..m.values().len() {
                prop_assert!((m.values()[i] - mp.values()[i] - mq.values()[i]).abs() < 1e-12);
            }
        }
    }
}
