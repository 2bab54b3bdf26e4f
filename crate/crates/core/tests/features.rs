use norppa_core::features::{
    describe_regions, detect_regions, extract_features, DescriptorParams, DetectorParams, ScaleSpace,
};
use norppa_core::synthetic::{Affine2, RingPattern};

fn repeatability(view: Affine2, size: usize) -> (f32, usize) {
    let pattern = RingPattern::random(11, 160, 9);
    let base = Affine2::similarity(0.0, 1.0, 80.0, 80.0, size as f32 / 2.0, size as f32 / 2.0);
    let a = pattern.render(&base, size, size, 0.0, 0);
    let warp = Affine2 {
        m: {
            // view ∘ base
            let (v, b) = (view.m, base.m);
            [
                v[0] * b[0] + v[1] * b[3],
                v[0] * b[1] + v[1] * b[4],
                v[0] * b[2] + v[1] * b[5] + v[2],
                v[3] * b[0] + v[4] * b[3],
                v[3] * b[1] + v[4] * b[4],
                v[3] * b[2] + v[4] * b[5] + v[5],
            ]
        },
    };
    let b = pattern.render(&warp, size, size, 0.0, 0);
    let params = DetectorParams::default();
    let ra = detect_regions(&a.to_raster(), &params);
    let rb = detect_regions(&b.to_raster(), &params);
    let mut considered = 0;
    let mut hits = 0;
    for r in &ra {
        let (x, y) = view.apply(r.cx, r.cy);
        if x < 5.0 || y < 5.0 || x > size as f32 - 5.0 || y > size as f32 - 5.0 {
            continue;
        }
        considered += 1;
        if rb.iter().any(|q| ((q.cx - x).powi(2) + (q.cy - y).powi(2)).sqrt() <= 3.0) {
            hits += 1;
        }
    }
    eprintln!("repeatability {hits}/{considered} (detected {} / {})", ra.len(), rb.len());
    (hits as f32 / considered.max(1) as f32, considered)
}

#[test]
fn rotation_repeatability() {
    let size = 200;
    let c = size as f32 / 2.0;
    let view = Affine2::similarity(30f32.to_radians(), 1.0, c, c, c, c);
    let (rate, n) = repeatability(view, size);
    assert!(n >= 10, "only {n} regions");
    assert!(rate >= 0.6, "repeatability {rate} over {n}");
}

#[test]
fn affine_covariance() {
    let size = 200;
    let c = size as f32 / 2.0;
    // Shear plus anisotropic scaling about the centre.
    let lin = [1.15f32, 0.2, -0.1, 0.9];
    let view =
        Affine2 { m: [lin[0], lin[1], c - lin[0] * c - lin[1] * c, lin[2], lin[3], c - lin[2] * c - lin[3] * c] };
    let (rate, n) = repeatability(view, size);
    assert!(n >= 10, "only {n} regions");
    assert!(rate >= 0.5, "repeatability {rate} over {n}");
}

#[test]
fn descriptors_unit_norm_on_patterns() {
    let pattern = RingPattern::random(3, 160, 9);
    let img = pattern.render(&Affine2::identity(), 160, 160, 0.0, 0);
    let set = extract_features(&img, &DetectorParams::default(), &DescriptorParams::default());
    assert!(set.len() > 10);
    for d in &set.descriptors {
        let n: f32 = d.values.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(d.values.len(), 128);
    }
}

#[test]
fn corresponding_patches_correlate_across_affine_views() {
    // A single elongated, asymmetric blot seen through two affine views; the
    // detected region in each view is normalized back to a canonical patch.
    let blot = |x: f32, y: f32| {
        let e1 = (-((x - 0.0).powi(2) / 60.0 + (y - 0.0).powi(2) / 14.0)).exp();
        let e2 = 0.6 * (-((x - 5.0).powi(2) / 10.0 + (y + 4.0).powi(2) / 10.0)).exp();
        e1 + e2
    };
    let render = |view: Affine2| {
        let inv = view.inverse();
        norppa_core::raster::Raster::from_fn(120, 120, |x, y| {
            let (px, py) = inv.apply(x as f32, y as f32);
            blot(px, py)
        })
    };
    let v1 = Affine2::similarity(0.0, 1.0, 0.0, 0.0, 60.0, 60.0);
    let lin = [0.9f32, 0.35, -0.2, 1.1];
    let v2 = Affine2 { m: [lin[0], lin[1], 60.0, lin[2], lin[3], 60.0] };
    let params = DetectorParams::default();
    let dparams = DescriptorParams { patch_size: 32, magnification: 2.0 };
    let mut patches = Vec::new();
    for v in [v1, v2] {
        let img = render(v);
        let space = ScaleSpace::build(&img, &params);
        let regions = detect_regions(&img, &params);
        let top = *regions
            .iter()
            .min_by(|a, b| {
                let da = (a.cx - 60.0).powi(2) + (a.cy - 60.0).powi(2);
                let db = (b.cx - 60.0).powi(2) + (b.cy - 60.0).powi(2);
                da.total_cmp(&db)
            })
            .expect("region near blot centre");
        let d = describe_regions(&space, &[top], &dparams);
        let r = d[0].region;
        let unit = 2.0 * dparams.magnification / 32.0;
        let mut scaled = r;
        scaled.shape = r.shape.map(|v| v * unit);
        patches.push(norppa_core::features::extract_patch(&img, &scaled, 32).unwrap());
    }
    let corr = patches[0].correlation(&patches[1]);
    eprintln!("patch correlation {corr}");
    assert!(corr >= 0.8, "correlation {corr}");
}
