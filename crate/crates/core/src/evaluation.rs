//! Counting metrics, subgroup breakdown, uncertainty correlation and
//! density heat-maps.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::densitymap::DensityMap;
use crate::error::{Error, Result};
use crate::imagedata::{LabeledSample, RgbImage};
use crate::network::{predict, ImageTensor, ModelOutput, ModelParams, TOTAL_STRIDE};
use crate::par;

/// Samples whose noise boxes cover at least this share of the frame are
/// put in the noise subgroup.
pub const NOISE_AREA_FRACTION: f64 = 0.05;

/// Heat-map overlay opacity.
pub const HEATMAP_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subgroup {
    #[serde(rename = "lt25")]
    Lt25,
    #[serde(rename = "25to50")]
    From25To50,
    #[serde(rename = "50to150")]
    From50To150,
    #[serde(rename = "ge150")]
    Ge150,
    #[serde(rename = "noise")]
    Noise,
}

impl Subgroup {
    pub const ALL: [Subgroup; 5] = [Subgroup::Lt25, Subgroup::From25To50, Subgroup::From50To150, Subgroup::Ge150, Subgroup::Noise];

    pub fn name(self) -> &'static str {
        match self {
            Subgroup::Lt25 => "lt25",
            Subgroup::From25To50 => "25to50",
            Subgroup::From50To150 => "50to150",
            Subgroup::Ge150 => "ge150",
            Subgroup::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<Subgroup> {
        Subgroup::ALL.into_iter().find(|g| g.name() == s)
    }

    pub fn by_count(c: f64) -> Subgroup {
        if c < 25.0 {
            Subgroup::Lt25
        } else if c < 50.0 {
            Subgroup::From25To50
        } else if c < 150.0 {
            Subgroup::From50To150
        } else {
            Subgroup::Ge150
        }
    }
}

impl fmt::Display for Subgroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn assign_subgroup(sample: &LabeledSample) -> Subgroup {
    assign_subgroup_with(sample, NOISE_AREA_FRACTION)
}

pub fn assign_subgroup_with(sample: &LabeledSample, noise_fraction: f64) -> Subgroup {
    let frame = (sample.image.width() * sample.image.height()) as f64;
    let noise: f64 = sample.noise.iter().map(|b| b.area()).sum();
    if frame > 0.0 && noise >= noise_fraction * frame {
        Subgroup::Noise
    } else {
        Subgroup::by_count(sample.count() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    pub c: f64,
    pub c_hat: f64,
    pub logvar: f64,
    pub subgroup: Subgroup,
}

impl SampleResult {
    pub fn abs_error(&self) -> f64 {
        (self.c - self.c_hat).abs()
    }
}

fn nonempty(results: &[SampleResult]) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Metric("empty result set".into()));
    }
    Ok(())
}

pub fn mae(results: &[SampleResult]) -> Result<f64> {
    nonempty(results)?;
    Ok(results.iter().map(|r| r.abs_error()).sum::<f64>() / results.len() as f64)
}

pub fn rmse(results: &[SampleResult]) -> Result<f64> {
    nonempty(results)?;
    Ok((results.iter().map(|r| (r.c - r.c_hat).powi(2)).sum::<f64>() / results.len() as f64).sqrt())
}

/// Normalized MAE of one subgroup: `sum |c - c_hat| / sum c`. `Ok(None)`
/// marks a subgroup whose true counts are all zero.
pub fn nmae(results: &[SampleResult], subgroup: Subgroup) -> Result<Option<f64>> {
    let members: Vec<&SampleResult> = results.iter().filter(|r| r.subgroup == subgroup).collect();
    if members.is_empty() {
        return Err(Error::Metric(format!("subgroup {subgroup} is empty")));
    }
    let total: f64 = members.iter().map(|r| r.c).sum();
    if total == 0.0 {
        return Ok(None);
    }
    Ok(Some(members.iter().map(|r| r.abs_error()).sum::<f64>() / total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// One-tailed p-value against `r <= 0`.
    pub p_one_tailed: f64,
    pub n: usize,
}

/// Pearson correlation with a one-tailed t-test. `None` when either series
/// has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<Correlation>> {
    if x.len() != y.len() {
        return Err(Error::Metric(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Metric(format!("correlation needs at least 3 samples, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r >= 1.0 {
        0.0
    } else if r <= -1.0 {
        1.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Metric(e.to_string()))?;
        dist.sf(t)
    };
    Ok(Some(Correlation { r, p_one_tailed: p, n }))
}

/// Correlation between predicted log variance and absolute count error.
pub fn uncertainty_correlation(results: &[SampleResult]) -> Result<Option<Correlation>> {
    let lv: Vec<f64> = results.iter().map(|r| r.logvar).collect();
    let err: Vec<f64> = results.iter().map(|r| r.abs_error()).collect();
    pearson(&lv, &err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupStats {
    pub n: usize,
    /// `None` for an empty subgroup or one whose true counts sum to zero.
    pub nmae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub subgroups: BTreeMap<Subgroup, SubgroupStats>,
    pub correlation: Option<Correlation>,
    /// Share of samples with `0 <= logvar < 1.7`.
    pub logvar_low_share: f64,
    pub per_sample: Vec<SampleResult>,
}

impl MetricsReport {
    pub fn from_results(per_sample: Vec<SampleResult>) -> Result<Self> {
        let mae = mae(&per_sample)?;
        let rmse = rmse(&per_sample)?;
        let mut subgroups = BTreeMap::new();
        for g in Subgroup::ALL {
            let n = per_sample.iter().filter(|r| r.subgroup == g).count();
            let nmae = if n == 0 { None } else { nmae(&per_sample, g)? };
            subgroups.insert(g, SubgroupStats { n, nmae });
        }
        let correlation = if per_sample.len() >= 3 { uncertainty_correlation(&per_sample)? } else { None };
        let low = per_sample.iter().filter(|r| (0.0..1.7).contains(&r.logvar)).count();
        let logvar_low_share = low as f64 / per_sample.len() as f64;
        if mae > rmse * (1.0 + 1e-12) {
            return Err(Error::Metric(format!("MAE {mae} exceeds RMSE {rmse}")));
        }
        Ok(MetricsReport { mae, rmse, subgroups, correlation, logvar_low_share, per_sample })
    }
}

/// Runs the model on every sample. Results keep the input order.
pub fn predict_samples(params: &ModelParams, samples: &[LabeledSample]) -> Result<Vec<(SampleResult, ModelOutput<f32>)>> {
    par::map_indices(samples.len(), |i| {
        let s = &samples[i];
        let out = predict(params, &ImageTensor::from_rgb(&s.image.pixels))?;
        let result = SampleResult {
            id: s.id().to_string(),
            c: s.count() as f64,
            c_hat: out.count(),
            logvar: out.logvar(),
            subgroup: assign_subgroup(s),
        };
        Ok((result, out))
    })
    .into_iter()
    .collect()
}

pub fn evaluate(params: &ModelParams, samples: &[LabeledSample]) -> Result<MetricsReport> {
    let results = predict_samples(params, samples)?.into_iter().map(|(r, _)| r).collect();
    MetricsReport::from_results(results)
}

/// Converts a predicted density channel into a map with stride 32.
pub fn density_of(output: &ModelOutput<f32>) -> DensityMap {
    let values = output.density.iter().map(|&v| v as f64).collect();
    DensityMap::from_values(output.height, output.width, TOTAL_STRIDE, values).expect("output shape is consistent")
}

/// Cold-to-hot ramp: blue, cyan, green, yellow, red at equal spacing.
pub const RAMP_STOPS: [[u8; 3]; 5] = [[0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]];

/// 256-entry lookup table built from [`RAMP_STOPS`] by linear interpolation.
pub fn ramp_lut() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    let segments = (RAMP_STOPS.len() - 1) as f64;
    for (i, entry) in lut.iter_mut().enumerate() {
        let t = i as f64 / 255.0 * segments;
        let k = (t.floor() as usize).min(RAMP_STOPS.len() - 2);
        let f = t - k as f64;
        for ch in 0..3 {
            let a = RAMP_STOPS[k][ch] as f64;
            let b = RAMP_STOPS[k + 1][ch] as f64;
            entry[ch] = (a + (b - a) * f).round() as u8;
        }
    }
    lut
}

/// Overlays a density map on `base`. Values are scaled by the map maximum
/// (a non-positive maximum gives an all-cold overlay), colored through
/// [`ramp_lut`], repeated over `stride x stride` blocks and alpha-blended.
pub fn render_heatmap(density: &DensityMap, base: &RgbImage) -> RgbImage {
    let lut = ramp_lut();
    let max = density.max();
    let stride = density.stride().max(1);
    let mut out = base.clone();
    for r in 0..base.height() {
        let gr = r / stride;
        for c in 0..base.width() {
            let gc = c / stride;
            let v = if gr < density.height() && gc < density.width() && max > 0.0 { (density.get(gr, gc) / max).clamp(0.0, 1.0) } else { 0.0 };
            let color = lut[(v * 255.0).round() as usize];
            let px = base.get(r, c);
            let mut blended = [0u8; 3];
            for ch in 0..3 {
                blended[ch] = (HEATMAP_ALPHA * color[ch] as f64 + (1.0 - HEATMAP_ALPHA) * px[ch] as f64).round() as u8;
            }
            out.set(r, c, blended);
        }
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

/// Per-sample rows: `id,c,c_hat,abs_error,logvar,subgroup`.
pub fn write_report_csv(path: &Path, results: &[SampleResult]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io = |e: csv::Error| Error::Metric(format!("{}: {e}", path.display()));
    w.write_record(["id", "c", "c_hat", "abs_error", "logvar", "subgroup"]).map_err(io)?;
    for r in results {
        w.write_record([r.id.clone(), r.c.to_string(), r.c_hat.to_string(), r.abs_error().to_string(), r.logvar.to_string(), r.subgroup.name().to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<SampleResult>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Metric(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Metric(format!("{}: {e}", path.display())))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Metric(format!("{}: bad field {i} in {rec:?}", path.display())))
        };
        let subgroup = rec
            .get(5)
            .and_then(Subgroup::parse)
            .ok_or_else(|| Error::Metric(format!("{}: bad subgroup in {rec:?}", path.display())))?;
        out.push(SampleResult { id: rec.get(0).unwrap_or_default().to_string(), c: num(1)?, c_hat: num(2)?, logvar: num(4)?, subgroup });
    }
    Ok(out)
}

/// Long-format summary: `metric,subgroup,n,value`.
pub fn write_summary_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io = |e: csv::Error| Error::Metric(format!("{}: {e}", path.display()));
    let n = report.per_sample.len().to_string();
    w.write_record(["metric", "subgroup", "n", "value"]).map_err(io)?;
    w.write_record(["MAE", "all", &n, &report.mae.to_string()]).map_err(io)?;
    w.write_record(["RMSE", "all", &n, &report.rmse.to_string()]).map_err(io)?;
    for (g, s) in &report.subgroups {
        let value = if s.n == 0 { "empty".to_string() } else { fmt_opt(s.nmae) };
        w.write_record(["NMAE", g.name(), &s.n.to_string(), &value]).map_err(io)?;
    }
    let (r, p) = match report.correlation {
        Some(c) => (c.r.to_string(), c.p_one_tailed.to_string()),
        None => ("undefined".into(), "undefined".into()),
    };
    w.write_record(["pearson_r", "all", &n, &r]).map_err(io)?;
    w.write_record(["p_one_tailed", "all", &n, &p]).map_err(io)?;
    w.write_record(["logvar_0_to_1.7_share", "all", &n, &report.logvar_low_share.to_string()]).map_err(io)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| Error::Metric(format!("{}: {e}", path.display())))
}

/// Renders any CSV file as a Markdown table.
pub fn csv_to_markdown(path: &Path) -> Result<String> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(|e| Error::Metric(format!("{}: {e}", path.display())))?;
    let mut out = String::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::Metric(format!("{}: {e}", path.display())))?;
        let cells: Vec<&str> = rec.iter().collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
        if i == 0 {
            out.push_str(&format!("|{}\n", "---|".repeat(cells.len())));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagedata::{ImageMeta, NoiseBox, NoiseKind, PointAnnotation, RawImage};

    fn res(c: f64, c_hat: f64) -> SampleResult {
        SampleResult { id: String::new(), c, c_hat, logvar: 0.0, subgroup: Subgroup::by_count(c) }
    }

    fn sample(c: usize, noise: Vec<NoiseBox>) -> LabeledSample {
        LabeledSample {
            image: RawImage { pixels: RgbImage::filled(100, 100, [0, 0, 0]), meta: ImageMeta { meters_per_pixel: 1.0, source_id: "s".into() } },
            points: (0..c).map(|i| PointAnnotation::new((i % 100) as f64, 1.0)).collect(),
            noise,
        }
    }

    #[test]
    fn mae_rmse_fixture() {
        let r = [res(10.0, 13.0), res(10.0, 6.0)];
        assert_eq!(mae(&r).unwrap(), 3.5);
        assert!((rmse(&r).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mae(&[res(5.0, 5.0)]).unwrap(), 0.0);
        assert!(mae(&[]).is_err());
    }

    #[test]
    fn nmae_fixture_and_zero_guard() {
        let r = [res(10.0, 12.0), res(30.0, 28.0)];
        let g = Subgroup::Lt25;
        let mut r = r.to_vec();
        for x in &mut r {
            x.subgroup = g;
        }
        assert!((nmae(&r, g).unwrap().unwrap() - 0.1).abs() < 1e-15);
        let zeros = vec![res(0.0, 1.0), res(0.0, 0.0)];
        assert_eq!(nmae(&zeros, Subgroup::Lt25).unwrap(), None);
        assert!(nmae(&zeros, Subgroup::Noise).is_err());
    }

    #[test]
    fn subgroup_rules() {
        assert_eq!(assign_subgroup(&sample(24, vec![])), Subgroup::Lt25);
        assert_eq!(assign_subgroup(&sample(200, vec![])), Subgroup::Ge150);
        let dolphin = NoiseBox { x0: 0.0, y0: 0.0, x1: 40.0, y1: 30.0, kind: NoiseKind::Dolphin };
        assert_eq!(assign_subgroup(&sample(10, vec![dolphin])), Subgroup::Noise);
        let speck = NoiseBox { x0: 0.0, y0: 0.0, x1: 4.0, y1: 3.0, kind: NoiseKind::Net };
        assert_eq!(assign_subgroup(&sample(10, vec![speck])), Subgroup::Lt25);
    }

    #[test]
    fn correlation_signs() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let c = pearson(&x, &x).unwrap().unwrap();
        assert_eq!(c.r, 1.0);
        assert_eq!(c.p_one_tailed, 0.0);
        let y: Vec<f64> = x.iter().map(|v| -v + (v * 7.0).sin()).collect();
        let c = pearson(&x, &y).unwrap().unwrap();
        assert!(c.r < 0.0 && c.p_one_tailed > 0.5);
        assert_eq!(pearson(&x, &[1.0; 20]).unwrap(), None);
    }

    #[test]
    fn t_test_matches_table_value() {
        // r = 0.5 with n = 12: t = 0.5 * sqrt(10 / 0.75) = 1.8257, df = 10,
        // one-tailed p = 0.0490 from standard t tables.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mean = 6.5;
        let sx: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        // y = 0.5 * zx + sqrt(0.75) * z_perp gives r = 0.5 exactly.
        let perp: Vec<f64> = x.iter().map(|v| if (*v as usize) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let pm = perp.iter().sum::<f64>() / 12.0;
        let proj: f64 = x.iter().zip(&perp).map(|(a, b)| (a - mean) * (b - pm)).sum::<f64>() / sx;
        let orth: Vec<f64> = x.iter().zip(&perp).map(|(a, b)| (b - pm) - proj * (a - mean)).collect();
        let so = orth.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y: Vec<f64> = x.iter().zip(&orth).map(|(a, o)| 0.5 * (a - mean) / sx.sqrt() + 0.75f64.sqrt() * o / so).collect();
        let c = pearson(&x, &y).unwrap().unwrap();
        assert!((c.r - 0.5).abs() < 1e-12);
        assert!((c.p_one_tailed - 0.0490).abs() < 5e-4);
    }

    #[test]
    fn heatmap_of_zero_map_is_uniformly_cold() {
        let base = RgbImage::filled(64, 96, [100, 100, 100]);
        let out = render_heatmap(&DensityMap::zeros(2, 3, 32), &base);
        assert_eq!((out.height(), out.width()), (64, 96));
        let first = out.get(0, 0);
        assert!(first[2] > first[0]);
        assert!((0..64).all(|r| (0..96).all(|c| out.get(r, c) == first)));
    }

    #[test]
    fn heatmap_hot_cell_is_one_red_block() {
        let base = RgbImage::filled(64, 96, [100, 100, 100]);
        let mut d = DensityMap::zeros(2, 3, 32);
        d.set(1, 2, 4.0);
        let out = render_heatmap(&d, &base);
        let hot = out.get(40, 70);
        assert_eq!(hot, [178, 50, 50]);
        for r in 0..64 {
            for c in 0..96 {
                let inside = r >= 32 && c >= 64;
                assert_eq!(out.get(r, c) == hot, inside, "({r}, {c})");
            }
        }
    }

    #[test]
    fn lut_endpoints() {
        let lut = ramp_lut();
        assert_eq!(lut[0], [0, 0, 255]);
        assert_eq!(lut[255], [255, 0, 0]);
    }

    #[test]
    fn report_invariants() {
        let mut results: Vec<SampleResult> = (0..30).map(|i| res(i as f64 * 7.0, i as f64 * 6.5 + 1.0)).collect();
        results[3].subgroup = Subgroup::Noise;
        let rep = MetricsReport::from_results(results.clone()).unwrap();
        assert!(rep.mae <= rep.rmse);
        for (g, s) in &rep.subgroups {
            if s.n > 0 {
                assert_eq!(s.nmae, nmae(&results, *g).unwrap());
            }
        }
    }
}
