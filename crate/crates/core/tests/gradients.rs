mod common;

use common::*;
use schoolcount::losses::{AblationRow, LossConfig};
use schoolcount::trainer::loss_and_gradient;

#[test]
fn every_ablation_row_matches_finite_differences() {
    let config = tiny_model(32, 64);
    let params = perturbed_params(&config, 1);
    assert!(params.trainable_count() <= 2000, "{} params", params.trainable_count());
    let batch = check_batch(&params, 3);
    for row in AblationRow::ALL {
        let r = gradient_check(&params, &row.loss_config(), &batch, 1e-3);
        assert_eq!(r.unresolved, 0, "row {}: kink unresolved", row.numeral());
        assert!(r.max_rel <= 1e-4, "row {}: {} ({})", row.numeral(), r.max_rel, r.worst);
    }
}

#[test]
fn positive_margin_matches_finite_differences() {
    let config = tiny_model(32, 32);
    let params = perturbed_params(&config, 4);
    let batch = check_batch(&params, 5);
    let cfg = LossConfig { epsilon: 0.5, lambda: 0.3, ..AblationRow::Ix.loss_config() };
    let r = gradient_check(&params, &cfg, &batch, 1e-3);
    assert!(r.max_rel <= 1e-4, "{} ({})", r.max_rel, r.worst);
}

#[test]
fn single_precision_gradient_tracks_double() {
    let config = tiny_model(32, 64);
    let p64 = perturbed_params(&config, 6);
    let p32 = p64.cast::<f32>();
    let b64 = check_batch(&p64, 7);
    let b32 = schoolcount::trainer::BatchInput {
        labelled: b64.labelled.iter().map(|(x, c)| (cast_image(x), *c)).collect(),
        pairs: b64.pairs.iter().map(|(a, b)| (cast_image(a), cast_image(b))).collect(),
    };
    let cfg = AblationRow::Viii.loss_config();
    let (l64, g64) = loss_and_gradient(&p64, &cfg, &b64).unwrap();
    let (l32, g32) = loss_and_gradient(&p32, &cfg, &b32).unwrap();
    assert!((l64.total - l32.total).abs() <= 1e-4 * l64.total.abs().max(1.0));
    for (a, b) in g64.tensors.iter().zip(&g32.tensors) {
        let scale = a.data.iter().fold(1e-6f64, |m, v| m.max(v.abs()));
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - *y as f64).abs() <= 1e-3 * scale, "{}: {x} vs {y}", a.name);
        }
    }
}

fn cast_image(x: &schoolcount::network::ImageTensor<f64>) -> schoolcount::network::ImageTensor<f32> {
    schoolcount::network::ImageTensor { height: x.height, width: x.width, data: x.data.iter().map(|&v| v as f32).collect() }
}
