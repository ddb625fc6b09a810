use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::io::{write_camera_meta, write_scan, write_scene, CameraMeta};
use super::{raycast_depth, shade_image, simulate_laser, Aabb, LaserParams, Scene, ShadeParams, Wall};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, Vec3};

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "id,split,image,depth,scan,camera,scene";

/// Scene randomization, rendering and laser parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view between the outermost pixel centers, radians.
    pub hfov: f64,
    pub max_range: f64,
    pub camera_height_min: f64,
    pub camera_height_max: f64,
    pub max_yaw: f64,
    pub room_min: f64,
    pub room_max: f64,
    pub box_count_min: usize,
    pub box_count_max: usize,
    pub box_size_min: f64,
    pub box_size_max: f64,
    /// Probability that a box is a raised slab (table top) instead of
    /// standing on the ground.
    pub raised_box_p: f64,
    pub ambient: f64,
    pub laser_height: f64,
    /// Laser field of view; 0 means the camera's horizontal field of view.
    pub laser_fov: f64,
    /// Ray count; 0 means one ray per image column.
    pub laser_rays: usize,
    pub laser_noise: f64,
    pub laser_dropout: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 48,
            hfov: 1.1,
            max_range: 20.0,
            camera_height_min: 1.0,
            camera_height_max: 1.5,
            max_yaw: 0.35,
            room_min: 4.0,
            room_max: 8.0,
            box_count_min: 2,
            box_count_max: 6,
            box_size_min: 0.2,
            box_size_max: 1.5,
            raised_box_p: 0.3,
            ambient: 0.35,
            laser_height: 0.8,
            laser_fov: 0.0,
            laser_rays: 0,
            laser_noise: 0.01,
            laser_dropout: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::centered(self.width, self.height, self.hfov)
    }

    pub fn shade(&self) -> ShadeParams {
        ShadeParams {
            ambient: self.ambient,
            ..ShadeParams::default()
        }
    }

    pub fn laser(&self) -> Result<LaserParams> {
        let k = self.intrinsics()?;
        Ok(LaserParams {
            mount_height: self.laser_height,
            fov: if self.laser_fov > 0.0 { self.laser_fov } else { k.hfov() },
            n_rays: if self.laser_rays > 0 {
                self.laser_rays
            } else {
                self.width
            },
            noise_sigma: self.laser_noise,
            dropout_p: self.laser_dropout,
            max_range: self.max_range,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.width < 4 || self.height < 4 || !self.width.is_multiple_of(2) || !self.height.is_multiple_of(2) {
            return fail("image size must be even and at least 4x4");
        }
        if !(self.camera_height_min > self.laser_height && self.camera_height_max >= self.camera_height_min) {
            return fail("camera height range must lie above the laser height");
        }
        if !(self.room_min > 1.0 && self.room_max >= self.room_min) {
            return fail("room size range is invalid");
        }
        if self.box_count_max < self.box_count_min {
            return fail("box count range is invalid");
        }
        if !(self.box_size_min > 0.0 && self.box_size_max >= self.box_size_min) {
            return fail("box size range is invalid");
        }
        if !(0.0..=1.0).contains(&self.raised_box_p) || !(0.0..=1.0).contains(&self.laser_dropout) {
            return fail("probabilities must lie in [0, 1]");
        }
        if !(self.max_range > 0.0 && self.laser_height > 0.0 && self.laser_noise >= 0.0) {
            return fail("ranges and laser height must be positive");
        }
        self.intrinsics().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// A random room with boxes in front of a level camera.
pub fn random_scene(cfg: &SceneConfig, rng: &mut impl Rng) -> (Scene, CameraPose) {
    let w = rng.random_range(cfg.room_min..=cfg.room_max);
    let d = rng.random_range(cfg.room_min..=cfg.room_max);
    let albedo = |rng: &mut dyn rand::RngCore| rng.random_range(0.25..=1.0);
    let walls = vec![
        Wall::facing(Vec3::new(-w / 2.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), albedo(rng)),
        Wall::facing(Vec3::new(w / 2.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0), albedo(rng)),
        Wall::facing(Vec3::new(0.0, 0.0, d / 2.0), Vec3::new(0.0, 0.0, -1.0), albedo(rng)),
        Wall::facing(Vec3::new(0.0, 0.0, -d / 2.0), Vec3::new(0.0, 0.0, 1.0), albedo(rng)),
    ];
    let cam_z = -d / 2.0 + rng.random_range(0.3..=1.0);
    let position = Vec3::new(
        rng.random_range(-w / 4.0..=w / 4.0),
        rng.random_range(cfg.camera_height_min..=cfg.camera_height_max),
        cam_z,
    );
    let yaw = rng.random_range(-cfg.max_yaw..=cfg.max_yaw);

    let n_boxes = rng.random_range(cfg.box_count_min..=cfg.box_count_max);
    let mut boxes = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let sx = rng.random_range(cfg.box_size_min..=cfg.box_size_max).min(w - 0.2);
        let sz = rng.random_range(cfg.box_size_min..=cfg.box_size_max);
        let raised = rng.random::<f64>() < cfg.raised_box_p;
        let (bottom, sy) = if raised {
            (rng.random_range(0.3..=0.9), rng.random_range(0.04..=0.25))
        } else {
            (0.0, rng.random_range(cfg.box_size_min..=cfg.box_size_max))
        };
        let x = rng.random_range((-w / 2.0 + sx / 2.0)..=(w / 2.0 - sx / 2.0));
        let z_lo = cam_z + 1.0 + sz / 2.0;
        let z_hi = d / 2.0 - sz / 2.0;
        let a = albedo(rng);
        if z_hi <= z_lo {
            continue;
        }
        let z = rng.random_range(z_lo..=z_hi);
        boxes.push(Aabb::new(
            Vec3::new(x - sx / 2.0, bottom, z - sz / 2.0),
            Vec3::new(x + sx / 2.0, bottom + sy, z + sz / 2.0),
            a,
        ));
    }
    let scene = Scene {
        boxes,
        walls,
        ground_albedo: albedo(rng),
    };
    (scene, CameraPose::level(position, yaw))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Paths of one generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFiles {
    pub id: String,
    pub split: Split,
    pub image: PathBuf,
    pub depth: PathBuf,
    pub scan: PathBuf,
    pub camera: PathBuf,
    pub scene: PathBuf,
}

impl SampleFiles {
    fn in_dir(root: &Path, id: &str, split: Split) -> Self {
        let dir = root.join("samples").join(id);
        SampleFiles {
            id: id.to_string(),
            split,
            image: dir.join("image.pgm"),
            depth: dir.join("depth.pfm"),
            scan: dir.join("scan.csv"),
            camera: dir.join("camera.txt"),
            scene: dir.join("scene.txt"),
        }
    }

    pub fn dir(&self) -> &Path {
        self.image.parent().expect("sample files live in a directory")
    }

    /// Loads the sample files that sit in `dir` (as written by
    /// [`generate_dataset`]).
    pub fn from_dir(dir: &Path, split: Split) -> Self {
        let id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        SampleFiles {
            id,
            split,
            image: dir.join("image.pgm"),
            depth: dir.join("depth.pfm"),
            scan: dir.join("scan.csv"),
            camera: dir.join("camera.txt"),
            scene: dir.join("scene.txt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub samples: Vec<SampleFiles>,
}

impl DatasetSummary {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleFiles> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Reads `manifest.csv` from a dataset directory.
    pub fn load(root: &Path) -> Result<DatasetSummary> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
            return Err(Error::format(
                "manifest",
                format!("expected header `{MANIFEST_HEADER}`"),
            ));
        }
        let mut samples = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::format("manifest", format!("bad row `{line}`")));
            }
            let split = match f[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                o => return Err(Error::format("manifest", format!("unknown split `{o}`"))),
            };
            samples.push(SampleFiles {
                id: f[0].to_string(),
                split,
                image: root.join(f[2]),
                depth: root.join(f[3]),
                scan: root.join(f[4]),
                camera: root.join(f[5]),
                scene: root.join(f[6]),
            });
        }
        Ok(DatasetSummary { samples })
    }
}

fn write_sample(files: &SampleFiles, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let k = cfg.intrinsics()?;
    let (scene, pose) = random_scene(cfg, rng);
    let laser_seed = rng.random::<u64>();
    let depth = raycast_depth(&scene, &pose, &k, cfg.max_range);
    depth.check_invariants(cfg.max_range as f32)?;
    let image = shade_image(&scene, &pose, &k, &cfg.shade(), cfg.max_range);
    let scan = simulate_laser(&scene, &pose, &cfg.laser()?, laser_seed)?;
    let meta = CameraMeta {
        intrinsics: k,
        gravity: pose.gravity_frame()?,
    };
    let dir = files.dir();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    image.write_pgm(&files.image)?;
    depth.write_pfm(&files.depth)?;
    write_scan(&files.scan, &scan)?;
    write_camera_meta(&files.camera, &meta)?;
    write_scene(&files.scene, &scene, &pose)?;
    Ok(())
}

/// Renders `n_scenes` independent scenes (one view each) into `root`.
/// The first `round(n_scenes * split_ratio)` scenes form the training split.
/// Output depends only on `(cfg, n_scenes, split_ratio, seed)`.
pub fn generate_dataset(
    root: &Path,
    cfg: &SceneConfig,
    n_scenes: usize,
    split_ratio: f64,
    seed: u64,
) -> Result<DatasetSummary> {
    if n_scenes < 2 {
        return Err(Error::Config(format!("need at least 2 scenes, got {n_scenes}")));
    }
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::Config(format!("split ratio {split_ratio} outside [0, 1]")));
    }
    cfg.validate()?;
    let n_train = (n_scenes as f64 * split_ratio).round() as usize;
    let samples: Vec<SampleFiles> = (0..n_scenes)
        .map(|i| {
            let split = if i < n_train { Split::Train } else { Split::Test };
            SampleFiles::in_dir(root, &format!("{i:05}"), split)
        })
        .collect();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    samples
        .par_iter()
        .enumerate()
        .map(|(i, files)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            write_sample(files, cfg, &mut rng)
        })
        .collect::<Result<Vec<()>>>()?;

    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for s in &samples {
        let rel = |p: &Path| p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned();
        writeln!(
            manifest,
            "{},{},{},{},{},{},{}",
            s.id,
            s.split.as_str(),
            rel(&s.image),
            rel(&s.depth),
            rel(&s.scan),
            rel(&s.camera),
            rel(&s.scene)
        )
        .unwrap();
    }
    let path = root.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(DatasetSummary { samples })
}
