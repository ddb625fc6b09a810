//! Exhaustive obstacle-map oracle and the table-with-void scene.

use depthfuse::eval::{compare_obstacle_sources, obstacle_map, FLOOR_TOLERANCE};
use depthfuse::geometry::{back_project, CameraIntrinsics, CameraPose, GravityFrame, Vec3};
use depthfuse::raster::DepthMap;
use depthfuse::scene_sim::{random_scene, raycast_depth, Aabb, Scene, SceneConfig, Wall};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Exhaustive per-bin minimum over every back-projected point, visiting
/// pixels in a shuffled order.
pub fn brute_force_minima(
    depth: &DepthMap,
    k: &CameraIntrinsics,
    gf: &GravityFrame,
    m: f64,
    n: usize,
    seed: u64,
) -> Vec<Option<f64>> {
    let (right, fwd) = gf.horizontal_basis().unwrap();
    let fov = k.hfov();
    let mut pixels: Vec<(usize, usize)> = (0..depth.height)
        .flat_map(|v| (0..depth.width).map(move |u| (u, v)))
        .collect();
    pixels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let points: Vec<(f64, f64, f64)> = pixels
        .iter()
        .filter_map(|&(u, v)| {
            let z = depth.get(u, v)? as f64;
            let p = back_project(u as f64, v as f64, z, k);
            let (x, f) = (p.dot(&right), p.dot(&fwd));
            Some((x.atan2(f), x.hypot(f), gf.height_of(&p)))
        })
        .collect();
    (0..n)
        .map(|bin| {
            points
                .iter()
                .filter(|(b, d, h)| {
                    *h > FLOOR_TOLERANCE && *h <= m && *d > 0.0 && b.abs() <= fov / 2.0 && {
                        let i = (((b + fov / 2.0) / fov) * n as f64).floor() as usize;
                        i.min(n - 1) == bin
                    }
                })
                .map(|p| p.1)
                .min_by(f64::total_cmp)
        })
        .collect()
}

/// Obstacle maps of 20 random scenes against the brute force.
pub fn exhaustive_minima_cases() {
    let cfg = SceneConfig::default();
    let k = cfg.intrinsics().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for i in 0..20 {
        let (scene, pose) = random_scene(&cfg, &mut rng);
        let depth = raycast_depth(&scene, &pose, &k, cfg.max_range);
        let gf = pose.gravity_frame().unwrap();
        let map = obstacle_map(&depth, &k, &gf, 1.0, 32).unwrap();
        let oracle = brute_force_minima(&depth, &k, &gf, 1.0, 32, i);
        assert_eq!(map.nearest, oracle, "scene {i}");
        // The planar quantities agree with a world-frame reconstruction.
        for v in (0..k.height).step_by(7) {
            for u in (0..k.width).step_by(5) {
                let Some(z) = depth.get(u, v) else { continue };
                let p = back_project(u as f64, v as f64, z as f64, &k);
                let w = pose.cam_to_world(&p);
                assert!((gf.height_of(&p) - w.y).abs() < 1e-9);
                let (dx, dz) = (w.x - pose.position.x, w.z - pose.position.z);
                let (right, fwd) = gf.horizontal_basis().unwrap();
                assert!((p.dot(&right).hypot(p.dot(&fwd)) - dx.hypot(dz)).abs() < 1e-9);
            }
        }
    }
}

/// A tabletop at 70 to 75 cm on thin legs' worth of nothing: open space
/// underneath, a wall behind.
pub fn table_with_void() -> (Scene, CameraPose) {
    let scene = Scene {
        boxes: vec![Aabb::new(Vec3::new(-0.8, 0.70, 1.8), Vec3::new(0.8, 0.75, 2.6), 0.6)],
        walls: vec![Wall::facing(Vec3::new(0.0, 0.0, 4.0), Vec3::new(0.0, 0.0, -1.0), 0.5)],
        ground_albedo: 0.5,
    };
    (scene, CameraPose::level(Vec3::new(0.0, 1.2, 0.0), 0.0))
}

/// The low scan passes under the tabletop the dense map sees.
pub fn table_with_void_case() {
    let (scene, pose) = table_with_void();
    let k = CameraIntrinsics::centered(64, 48, 1.1).unwrap();
    let truth = raycast_depth(&scene, &pose, &k, 20.0);
    let cmp = compare_obstacle_sources(&scene, &pose, &k, &[0.2, 0.72], &truth, 1.0, 32, 20.0).unwrap();
    assert_eq!(
        cmp.predicted, cmp.truth,
        "prediction equal to ground truth must give the same map"
    );
    // Bins looking at the table: the dense map sees it at about 1.8 m.
    let table_bins: Vec<usize> = (0..cmp.truth.len())
        .filter(|&i| cmp.truth.nearest[i].is_some_and(|d| d < 2.7))
        .collect();
    assert!(table_bins.len() >= 4, "{:?}", cmp.truth.nearest);
    let low = &cmp.lasers[0];
    for &i in &table_bins {
        // The 20 cm scan runs under the table to the wall.
        let s = low.map.nearest[i].expect("low laser reaches the wall");
        assert!(s > 3.9, "bin {i}: {s}");
        assert!(low.missed_vs_truth.contains(&i), "bin {i} not reported as missed");
    }
    // A scan through the tabletop sees it.
    let mid = &cmp.lasers[1];
    for &i in &table_bins {
        assert!(!mid.missed_vs_truth.contains(&i));
    }
}
