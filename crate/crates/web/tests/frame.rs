use schoolcount_web::{Frame, HEIGHT, WIDTH};

#[test]
fn frame_views_have_canvas_size() {
    let f = Frame::new(3, 40, true, 0.3);
    assert_eq!(f.count(), 40);
    assert_eq!(f.points().len(), 80);
    assert_eq!(f.pixels().len(), HEIGHT * WIDTH * 4);
    for stride in [8, 16, 32, 7] {
        assert_eq!(f.density_overlay(stride).len(), HEIGHT * WIDTH * 4);
    }
    for k in 0..4 {
        assert_eq!(f.subregion(k).len(), HEIGHT * WIDTH * 4);
    }
    assert!(!f.noise_boxes().is_empty());
}

#[test]
fn density_integrates_to_count() {
    for n in [0, 1, 57, 438] {
        let f = Frame::new(n, n, false, 0.2);
        assert!((f.density_total() - n as f64).abs() < 1e-6);
    }
}

#[test]
fn subregions_never_gain_fish() {
    for seed in 0..20 {
        let f = Frame::new(seed, 120, false, 0.3);
        let counts: Vec<usize> = (0..4).map(|k| f.subregion_count(k)).collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
        for k in 0..4 {
            assert_eq!(f.subregion_points(k).len(), 2 * counts[k]);
        }
    }
}

#[test]
fn same_seed_same_frame() {
    assert_eq!(Frame::new(9, 30, true, 0.5).pixels(), Frame::new(9, 30, true, 0.5).pixels());
    assert_ne!(Frame::new(9, 30, true, 0.5).pixels(), Frame::new(10, 30, true, 0.5).pixels());
}
