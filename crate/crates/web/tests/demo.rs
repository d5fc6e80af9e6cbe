use caddm_web::Scene;

// Success paths only: building a JsError needs a JS host.

#[test]
fn page_flow_on_every_method() {
    for method in ["splice_soft", "splice_hard", "color_shift", "warp"] {
        let scene = Scene::new(7, method).unwrap();
        let pixels = scene.width() * scene.height() * 4;
        assert_eq!(scene.dssim_rgba().len(), pixels);
        let swap = scene.swap(40, 40, true).unwrap();
        assert_eq!(swap.image().len(), pixels);
        let b = swap.artifact_box();
        let rows = scene.match_box(b[0], b[1], b[2], b[3], 5).unwrap();
        assert_eq!(rows.len(), 25);
        assert!(rows.iter().skip(4).step_by(5).all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn random_draws_differ_by_index() {
    let scene = Scene::new(3, "warp").unwrap();
    let a = scene.random_swap(0, 0.25).unwrap();
    let b = scene.random_swap(0, 0.25).unwrap();
    assert_eq!(a.image(), b.image());
    let differs = (1..8).any(|i| scene.random_swap(i, 0.25).unwrap().artifact_box() != a.artifact_box());
    assert!(differs);
    assert!(scene.anchor_count() > 0);
}
