//! Brute-force rendering of the vertical curtain a scan spans.

use depthfuse::geometry::{CameraIntrinsics, GravityFrame, Vec3};
use depthfuse::refmap::{build_reference, interpolate_scan, median_filter_scan, DEFAULT_MEDIAN_WINDOW};
use depthfuse::scene_sim::{random_scene, simulate_laser, LaserScan, SceneConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Brute-force render of the vertical curtain through the polyline of
/// `scan`'s valid points: every pixel ray is intersected with every
/// vertical quad between consecutive points and the nearest hit wins.
/// Returns `None` for pixels that miss every quad.
pub fn oracle_render(scan: &LaserScan, gf: &GravityFrame, k: &CameraIntrinsics) -> Vec<Option<f64>> {
    let g = gf.g;
    let z = Vec3::new(0.0, 0.0, 1.0);
    let fwd = (z - g * g.dot(&z)).normalize();
    let right = g.cross(&fwd);
    let pts: Vec<(f64, f64)> = (0..scan.len())
        .filter(|&i| scan.valid[i])
        .map(|i| {
            (
                scan.ranges[i] * scan.bearings[i].sin(),
                scan.ranges[i] * scan.bearings[i].cos(),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(k.width * k.height);
    for v in 0..k.height {
        for u in 0..k.width {
            // Unnormalized ray with unit z, so the hit parameter is the z-depth.
            let d = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let (a, b) = (d.dot(&right), d.dot(&fwd));
            let mut best: Option<f64> = None;
            for w in pts.windows(2) {
                let (p, q) = (w[0], w[1]);
                let e = (q.0 - p.0, q.1 - p.1);
                // Solve t*(a, b) = p + s*e.
                let det = a * (-e.1) - b * (-e.0);
                if det.abs() < 1e-15 {
                    continue;
                }
                let t = (p.0 * (-e.1) - p.1 * (-e.0)) / det;
                let s = (a * p.1 - b * p.0) / det;
                if t > 0.0 && (-1e-9..=1.0 + 1e-9).contains(&s) && best.is_none_or(|x| t < x) {
                    best = Some(t);
                }
            }
            out.push(best);
        }
    }
    out
}

/// The scan `build_reference` renders: smoothed, then imputed at every
/// column bearing inside the valid span (plus the span edges).
pub fn dense_scan(scan: &LaserScan, k: &CameraIntrinsics) -> LaserScan {
    let s = median_filter_scan(scan, DEFAULT_MEDIAN_WINDOW).unwrap();
    let valid: Vec<f64> = (0..s.len()).filter(|&i| s.valid[i]).map(|i| s.bearings[i]).collect();
    let (lo, hi) = (valid[0], *valid.last().unwrap());
    let mut t: Vec<f64> = vec![lo];
    t.extend(k.column_bearings().into_iter().filter(|b| *b > lo && *b < hi));
    t.push(hi);
    interpolate_scan(&s, &t).unwrap()
}

/// Column-fill rendering against the oracle on 20 random scenes.
pub fn column_fill_cases() {
    let cfg = SceneConfig::default();
    let k = cfg.intrinsics().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut compared = 0usize;
    for i in 0..20 {
        let (scene, pose) = random_scene(&cfg, &mut rng);
        let scan = simulate_laser(&scene, &pose, &cfg.laser().unwrap(), i).unwrap();
        let gf = pose.gravity_frame().unwrap();
        let r = build_reference(&scan, &gf, &k, DEFAULT_MEDIAN_WINDOW).unwrap();
        assert_eq!(r.depth.n_valid(), k.width * k.height, "reference must be dense");
        let oracle = oracle_render(&dense_scan(&scan, &k), &gf, &k);
        for (j, o) in oracle.iter().enumerate() {
            match o {
                Some(z) => {
                    assert!(!r.extrapolated[j]);
                    let got = r.depth.values[j] as f64;
                    // f32 storage of a depth below 20 m rounds by < 1e-6.
                    assert!((got - z).abs() < 1e-4, "scene {i} pixel {j}: {got} vs {z}");
                    compared += 1;
                }
                None => assert!(
                    r.extrapolated[j],
                    "scene {i} pixel {j} outside the curtain but not flagged"
                ),
            }
        }
    }
    assert!(compared > 20 * 64 * 40);
}
