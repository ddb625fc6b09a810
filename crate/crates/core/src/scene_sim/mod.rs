//! Synthetic scenes with analytic ground truth: ray-cast depth, Lambertian
//! pseudo-images and simulated planar laser scans.

mod dataset;
mod io;

pub use dataset::{
    generate_dataset, random_scene, DatasetSummary, SampleFiles, SceneConfig, Split, MANIFEST, MANIFEST_HEADER,
};
pub use io::{
    decode_scan, encode_scan, parse_key_values, read_camera_meta, read_scan, read_scene, write_camera_meta, write_scan,
    write_scene, CameraMeta, SCAN_HEADER,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{pixel_to_ray, CameraIntrinsics, CameraPose, Vec3};
use crate::raster::{DepthMap, GrayImage};

/// Hits closer than this are treated as self-intersections.
const T_EPS: f64 = 1e-9;

/// Axis-aligned box in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
    pub albedo: f64,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3, albedo: f64) -> Self {
        Aabb { min, max, albedo }
    }

    /// Slab test; returns the entry distance and the outward normal of the
    /// entered face. Rays starting inside the box do not hit it.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 0;
        let mut sign = 0.0;
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut t0, mut t1) = ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv);
            let mut s = -1.0;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
                s = 1.0;
            }
            if t0 > t_near {
                t_near = t0;
                axis = a;
                sign = s;
            }
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        if t_near <= T_EPS {
            return None;
        }
        let mut n = Vec3::zeros();
        n[axis] = sign;
        Some((t_near, n))
    }
}

/// Vertical plane `normal · p = offset`; `normal` is horizontal and points
/// into the room, so only rays travelling against it hit the wall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wall {
    pub normal: Vec3,
    pub offset: f64,
    pub albedo: f64,
}

impl Wall {
    /// Wall through `point` whose visible side faces `normal`.
    pub fn facing(point: Vec3, normal: Vec3, albedo: f64) -> Self {
        let n = Vec3::new(normal.x, 0.0, normal.z).normalize();
        Wall {
            normal: n,
            offset: n.dot(&point),
            albedo,
        }
    }

    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let den = self.normal.dot(dir);
        if den >= 0.0 {
            return None;
        }
        let t = (self.offset - self.normal.dot(origin)) / den;
        (t > T_EPS).then_some(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub boxes: Vec<Aabb>,
    pub walls: Vec<Wall>,
    /// Reflectance of the ground plane at height 0.
    pub ground_albedo: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
    pub albedo: f64,
}

impl Scene {
    pub fn empty() -> Self {
        Scene {
            boxes: Vec::new(),
            walls: Vec::new(),
            ground_albedo: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            let ext = b.max - b.min;
            if !(ext.x > 0.0 && ext.y > 0.0 && ext.z > 0.0) {
                return Err(Error::Domain(format!("box {i} has non-positive extent")));
            }
            if b.min.y < 0.0 {
                return Err(Error::Domain(format!("box {i} extends below the ground")));
            }
        }
        let albedos = self
            .boxes
            .iter()
            .map(|b| b.albedo)
            .chain(self.walls.iter().map(|w| w.albedo))
            .chain(std::iter::once(self.ground_albedo));
        for a in albedos {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Domain(format!("albedo {a} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Nearest intersection of a world-frame ray (unit direction) with any
    /// primitive. Every primitive is tested; there is no acceleration
    /// structure.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, normal: Vec3, albedo: f64| {
            if best.is_none_or(|b| t < b.t) {
                best = Some(Hit { t, normal, albedo });
            }
        };
        if origin.y > 0.0 && dir.y < 0.0 {
            consider(-origin.y / dir.y, Vec3::new(0.0, 1.0, 0.0), self.ground_albedo);
        }
        for w in &self.walls {
            if let Some(t) = w.intersect(origin, dir) {
                consider(t, w.normal, w.albedo);
            }
        }
        for b in &self.boxes {
            if let Some((t, n)) = b.intersect(origin, dir) {
                consider(t, n, b.albedo);
            }
        }
        best
    }
}

/// World-frame ray through pixel `(u, v)` and the z component of its unit
/// camera-frame direction.
fn world_ray(pose: &CameraPose, k: &CameraIntrinsics, u: usize, v: usize) -> (Vec3, f64) {
    let ray = pixel_to_ray(u as f64, v as f64, k).expect("pixel in bounds");
    (pose.dir_to_world(&ray.direction), ray.direction.z)
}

/// Ground-truth z-depth for every pixel; pixels whose nearest hit is beyond
/// `max_range` (or missing) are invalid.
pub fn raycast_depth(scene: &Scene, pose: &CameraPose, k: &CameraIntrinsics, max_range: f64) -> DepthMap {
    let mut map = DepthMap::invalid(k.width, k.height);
    for v in 0..k.height {
        for u in 0..k.width {
            let (dir, dz) = world_ray(pose, k, u, v);
            if let Some(hit) = scene.intersect(&pose.position, &dir) {
                if hit.t <= max_range {
                    map.set(u, v, (hit.t * dz) as f32);
                }
            }
        }
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadeParams {
    /// Unit direction toward the light, world frame.
    pub light: Vec3,
    pub ambient: f64,
}

impl Default for ShadeParams {
    fn default() -> Self {
        ShadeParams {
            light: Vec3::new(-0.35, 0.8, -0.5).normalize(),
            ambient: 0.35,
        }
    }
}

impl ShadeParams {
    pub fn radiance(&self, normal: &Vec3, albedo: f64) -> f64 {
        let lambert = normal.dot(&self.light).max(0.0);
        (albedo * (self.ambient + (1.0 - self.ambient) * lambert)).clamp(0.0, 1.0)
    }
}

/// Lambertian pseudo-image; pixels that hit nothing within `max_range` are 0.
pub fn shade_image(
    scene: &Scene,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    shade: &ShadeParams,
    max_range: f64,
) -> GrayImage {
    let mut img = GrayImage::new(k.width, k.height);
    for v in 0..k.height {
        for u in 0..k.width {
            let (dir, _) = world_ray(pose, k, u, v);
            if let Some(hit) = scene.intersect(&pose.position, &dir) {
                if hit.t <= max_range {
                    img.data[v * k.width + u] = shade.radiance(&hit.normal, hit.albedo) as f32;
                }
            }
        }
    }
    img
}

/// Planar range scan in camera azimuth. Bearings increase to the right.
#[derive(Debug, Clone, PartialEq)]
pub struct LaserScan {
    pub mount_height: f64,
    pub bearings: Vec<f64>,
    pub ranges: Vec<f64>,
    pub valid: Vec<bool>,
}

impl LaserScan {
    pub fn new(mount_height: f64, bearings: Vec<f64>, ranges: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let scan = LaserScan {
            mount_height,
            bearings,
            ranges,
            valid,
        };
        scan.validate()?;
        Ok(scan)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.bearings.len();
        if self.ranges.len() != n || self.valid.len() != n {
            return Err(Error::Shape("scan columns have different lengths".into()));
        }
        if !(self.mount_height > 0.0) {
            return Err(Error::Domain("laser mount height must be positive".into()));
        }
        if self.bearings.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("scan bearings must be strictly increasing".into()));
        }
        for i in 0..n {
            if self.valid[i] && !(self.ranges[i] > 0.0 && self.ranges[i].is_finite()) {
                return Err(Error::Domain(format!("valid ray {i} has range {}", self.ranges[i])));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bearings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bearings.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Mirror image about the optical axis.
    pub fn mirrored(&self) -> LaserScan {
        LaserScan {
            mount_height: self.mount_height,
            bearings: self.bearings.iter().rev().map(|b| -b).collect(),
            ranges: self.ranges.iter().rev().copied().collect(),
            valid: self.valid.iter().rev().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaserParams {
    pub mount_height: f64,
    pub fov: f64,
    pub n_rays: usize,
    pub noise_sigma: f64,
    pub dropout_p: f64,
    pub max_range: f64,
}

/// Casts `n_rays` horizontal rays at `mount_height` below the camera center,
/// uniformly over `fov` about the camera heading.
pub fn simulate_laser(scene: &Scene, pose: &CameraPose, p: &LaserParams, seed: u64) -> Result<LaserScan> {
    if !(p.mount_height > 0.0) {
        return Err(Error::Domain("laser mount height must be positive".into()));
    }
    if p.n_rays < 2 {
        return Err(Error::Domain("a scan needs at least two rays".into()));
    }
    if !(0.0..=1.0).contains(&p.dropout_p) || !(p.noise_sigma >= 0.0) {
        return Err(Error::Domain("dropout must be in [0, 1] and noise non-negative".into()));
    }
    let noise = Normal::new(0.0, p.noise_sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = Vec3::new(pose.position.x, p.mount_height, pose.position.z);
    let (sy, cy) = pose.yaw.sin_cos();
    let forward = Vec3::new(sy, 0.0, cy);
    let right = Vec3::new(cy, 0.0, -sy);

    let step = p.fov / (p.n_rays - 1) as f64;
    let mut bearings = Vec::with_capacity(p.n_rays);
    let mut ranges = Vec::with_capacity(p.n_rays);
    let mut valid = Vec::with_capacity(p.n_rays);
    for i in 0..p.n_rays {
        let theta = -p.fov / 2.0 + i as f64 * step;
        let dir = right * theta.sin() + forward * theta.cos();
        // Both draws happen for every ray so the stream does not depend on hits.
        let eps = noise.sample(&mut rng);
        let dropped = rng.random::<f64>() < p.dropout_p;
        let hit = scene.intersect(&origin, &dir).filter(|h| h.t <= p.max_range);
        let (r, ok) = match hit {
            Some(h) if !dropped => {
                let r = h.t + eps;
                (r, r > 0.0)
            }
            _ => (0.0, false),
        };
        bearings.push(theta);
        ranges.push(if ok { r } else { 0.0 });
        valid.push(ok);
    }
    LaserScan::new(p.mount_height, bearings, ranges, valid)
}
