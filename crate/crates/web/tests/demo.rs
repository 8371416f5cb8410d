use acacr_web::{build_scene, scene_metrics, similarity_rows, to_rgba};

#[test]
fn scene_buffers_have_rgba_layout() {
    let pair = build_scene(3, 32, 0.4, 0.5).unwrap();
    for t in [&pair.clear, &pair.cloudy, &pair.mask] {
        let rgba = to_rgba(t);
        assert_eq!(rgba.len(), 32 * 32 * 4);
        assert!(rgba.chunks(4).all(|p| p[3] == 255));
    }
    let mask = to_rgba(&pair.mask);
    assert!(mask.chunks(4).all(|p| p[0] == p[1] && p[1] == p[2]));
}

#[test]
fn invalid_scene_parameters_are_reported() {
    assert!(build_scene(1, 32, 1.5, 0.5).is_err());
    assert!(build_scene(1, 4, 0.4, 0.5).is_err());
}

#[test]
fn clear_scene_scores_perfectly() {
    let pair = build_scene(5, 32, 0.0, 0.5).unwrap();
    let m: serde_json::Value = serde_json::from_str(&scene_metrics(&pair).unwrap()).unwrap();
    assert_eq!(m["mae"], 0.0);
    assert_eq!(m["ssim"], 1.0);
    assert!(m["psnr_db"].is_null());
}

#[test]
fn attentive_row_prunes_but_softmax_row_does_not() {
    let pair = build_scene(2, 32, 0.4, 0.5).unwrap();
    let rows = similarity_rows(&pair, 2, 0.3, 0.6).unwrap();
    assert_eq!((rows.grid_rows(), rows.grid_cols()), (8, 8));
    assert_eq!(rows.query_index(), 2 * 8 + 4);
    let sp = rows.softmax_row();
    assert!((sp.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(sp.iter().all(|&v| v > 0.0));
    assert!(rows.attentive_row().iter().all(|&v| v >= 0.0));
    assert!(rows.pruned_count() >= 1);
}
