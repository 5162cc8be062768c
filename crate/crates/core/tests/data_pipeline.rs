mod common;

use common::*;
use schoolcount::augment::{augment_dataset, augment_plan, AugmentOp};
use schoolcount::densitymap::{integrate_count, make_density, KernelSpec};
use schoolcount::imagedata::{LabeledSample, PointAnnotation};
use schoolcount::rankpairs::generate_pairs;
use schoolcount::synthgen::{generate_dataset, CountDistribution, SynthSpec};

fn counts(spec: &SynthSpec, n: usize) -> Vec<f64> {
    generate_dataset(spec, n, 0).unwrap().labelled.iter().map(|s| s.count() as f64).collect()
}

#[test]
fn log_uniform_counts_are_skewed_low() {
    // P(c < 50) = ln 51 / ln 440 for c + 1 log-uniform on [1, 440).
    let analytic = 51f64.ln() / 440f64.ln();
    assert!(analytic >= 0.6, "{analytic}");
    let spec = SynthSpec { count_distribution: CountDistribution::LogUniform { lo: 0, hi: 438 }, ..small_spec(438, 3) };
    let c = counts(&spec, 500);
    let share = c.iter().filter(|&&v| v < 50.0).count() as f64 / c.len() as f64;
    assert!(share >= 0.6, "{share}");
    assert!((share - analytic).abs() < 0.07, "{share} vs {analytic}");
}

fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn seeds_change_histograms_not_their_shape() {
    let a = counts(&small_spec(438, 1), 500);
    let b = counts(&small_spec(438, 2), 500);
    assert_ne!(a, b);
    // Two-sample critical value at alpha = 0.01.
    let critical = 1.628 * (2.0f64 / 500.0).sqrt();
    let d = ks_statistic(&a, &b);
    assert!(d < critical, "D = {d}, critical {critical}");
}

#[test]
fn synthetic_counts_conserve_through_density() {
    let d = generate_dataset(&small_spec(200, 4), 40, 0).unwrap();
    for s in &d.labelled {
        let m = make_density(&s.points, s.image.height(), s.image.width(), KernelSpec::default()).unwrap();
        assert!((integrate_count(&m) - s.count() as f64).abs() <= 1e-6);
    }
}

#[test]
fn pairs_never_gain_fish() {
    let spec = small_spec(300, 5);
    let d = generate_dataset(&spec, 0, 100).unwrap();
    let images = d.unlabelled.iter().map(|u| u.image.clone()).collect();
    let set = generate_pairs(images, 600, [0, 0, 60], 9).unwrap();
    assert_eq!(set.pairs.len(), 600);
    for p in &set.pairs {
        let pts = &d.unlabelled[p.source].hidden_points;
        let first = set.element_count(p.source, p.first, pts);
        let second = set.element_count(p.source, p.second, pts);
        assert!(second <= first, "{p:?}: {second} > {first}");
    }
}

#[test]
fn full_pair_budget_matches_labelled_size() {
    let spec = SynthSpec { image_size: (32, 32), ..small_spec(10, 6) };
    let d = generate_dataset(&spec, 0, 946).unwrap();
    let set = generate_pairs(d.unlabelled.into_iter().map(|u| u.image).collect(), 5672, [0, 0, 0], 1).unwrap();
    assert_eq!(set.pairs.len(), 5672);
}

/// Independent point transform for the geometric ops.
fn oracle_point(op: &AugmentOp, p: PointAnnotation, h: f64, w: f64) -> Option<PointAnnotation> {
    let q = match op {
        AugmentOp::CropCompose { x0, y0, w: cw, h: ch, place_x, place_y } => {
            let (x0, y0) = (*x0 as f64, *y0 as f64);
            if p.x < x0 || p.y < y0 || p.x >= x0 + *cw as f64 || p.y >= y0 + *ch as f64 {
                return None;
            }
            (p.x - x0 + *place_x as f64, p.y - y0 + *place_y as f64)
        }
        AugmentOp::Translate { dx, dy } => (p.x + *dx as f64, p.y + *dy as f64),
        AugmentOp::Hflip => (w - p.x, p.y),
        AugmentOp::RotateSmall { degrees } => {
            let t = degrees * std::f64::consts::PI / 180.0;
            let (ux, uy) = (p.x - w / 2.0, p.y - h / 2.0);
            (t.cos() * ux - t.sin() * uy + w / 2.0, t.sin() * ux + t.cos() * uy + h / 2.0)
        }
        AugmentOp::SuperimposeNoise { .. } => (p.x, p.y),
    };
    (q.0 >= 0.0 && q.0 < w && q.1 >= 0.0 && q.1 < h).then(|| PointAnnotation::new(q.0, q.1))
}

fn check_expansion(train: &[LabeledSample], target: usize, seed: u64) {
    let out = augment_dataset(train, target, seed).unwrap();
    assert_eq!(out.len(), target);
    assert_eq!(&out[..train.len()], train);
    let plan = augment_plan(train, target, seed);
    assert_eq!(plan.len(), target - train.len());
    for (s, step) in out[train.len()..].iter().zip(&plan) {
        let src = &train[step.source];
        assert_eq!((s.image.height(), s.image.width()), (src.image.height(), src.image.width()));
        let (h, w) = (src.image.height() as f64, src.image.width() as f64);
        let expected: Vec<PointAnnotation> = src.points.iter().filter_map(|&p| oracle_point(&step.op, p, h, w)).collect();
        assert_eq!(s.count(), expected.len(), "{:?}", step.op);
        for (a, b) in s.points.iter().zip(&expected) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }
        s.validate().unwrap();
    }
}

#[test]
fn expansion_to_5672_keeps_originals_and_exact_counts() {
    let spec = SynthSpec { image_size: (32, 64), noise_rate: 0.4, ..small_spec(60, 7) };
    let train = generate_dataset(&spec, 350, 0).unwrap().labelled;
    check_expansion(&train, 5672, 11);
}

#[test]
fn expansion_identity_and_determinism() {
    let train = generate_dataset(&small_spec(40, 8), 12, 0).unwrap().labelled;
    assert_eq!(augment_dataset(&train, 12, 1).unwrap(), train);
    assert_eq!(augment_dataset(&train, 40, 1).unwrap(), augment_dataset(&train, 40, 1).unwrap());
    assert_ne!(augment_dataset(&train, 40, 1).unwrap(), augment_dataset(&train, 40, 2).unwrap());
    check_expansion(&train, 100, 3);
}
