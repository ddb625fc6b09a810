//! Pinhole camera model, gravity frame, and projection primitives.
//!
//! Camera frame: x right, y down, z forward. World frame: X right, Y up
//! (height above the ground plane), Z forward. Pixel `(u, v)` has its
//! center at integer coordinates, so the principal point `(cx, cy)` maps to
//! the optical axis.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the image center and a given
    /// horizontal field of view spanning the outermost pixel centers.
    pub fn centered(width: usize, height: usize, hfov: f64) -> Result<Self> {
        if width < 2 || height < 1 || !(hfov > 0.0 && hfov < std::f64::consts::PI) {
            return Err(Error::Domain(format!(
                "cannot build intrinsics for {width}x{height}, hfov {hfov}"
            )));
        }
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let f = cx / (hfov / 2.0).tan();
        Self::new(f, f, cx, cy, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Azimuth (radians, positive to the right) of the pixel column `u` for a
    /// level camera.
    pub fn column_bearing(&self, u: f64) -> f64 {
        ((u - self.cx) / self.fx).atan()
    }

    /// Bearings of every pixel column center, left to right.
    pub fn column_bearings(&self) -> Vec<f64> {
        (0..self.width).map(|u| self.column_bearing(u as f64)).collect()
    }

    /// Horizontal field of view between the outermost column centers.
    pub fn hfov(&self) -> f64 {
        self.column_bearing(self.width as f64 - 1.0) - self.column_bearing(0.0)
    }

    /// Intrinsics for the same camera rendered at `1/factor` resolution.
    pub fn downscaled(&self, factor: usize) -> Self {
        let s = factor as f64;
        CameraIntrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx + 0.5) / s - 0.5,
            cy: (self.cy + 0.5) / s - 0.5,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GravityFrame {
    /// Unit gravity direction in camera coordinates.
    pub g: Vec3,
    /// Camera height above the ground plane, meters.
    pub camera_height: f64,
}

impl GravityFrame {
    pub fn new(g: Vec3, camera_height: f64) -> Result<Self> {
        if ((g.norm() - 1.0).abs()) > 1e-9 {
            return Err(Error::Domain(format!("gravity vector not unit: |g| = {}", g.norm())));
        }
        if !(camera_height > 0.0) {
            return Err(Error::Domain(format!(
                "camera height must be positive, got {camera_height}"
            )));
        }
        Ok(GravityFrame { g, camera_height })
    }

    /// Level camera: gravity along +y.
    pub fn level(camera_height: f64) -> Result<Self> {
        Self::new(Vec3::new(0.0, 1.0, 0.0), camera_height)
    }

    pub fn is_level(&self) -> bool {
        (self.g - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-9
    }

    /// Horizontal basis `(right, forward)` in camera coordinates: both are
    /// perpendicular to gravity, `forward` is the optical axis with its
    /// gravity component removed.
    pub fn horizontal_basis(&self) -> Result<(Vec3, Vec3)> {
        let z = Vec3::new(0.0, 0.0, 1.0);
        let fwd = z - self.g * self.g.dot(&z);
        if fwd.norm() < 1e-6 {
            return Err(Error::Config(
                "gravity is parallel to the optical axis; no horizontal heading".into(),
            ));
        }
        let fwd = fwd.normalize();
        let right = self.g.cross(&fwd);
        Ok((right, fwd))
    }

    /// Height above ground of a camera-frame point.
    pub fn height_of(&self, p: &Vec3) -> f64 {
        self.camera_height - p.dot(&self.g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Domain("ray direction must be nonzero".into()));
        }
        Ok(Ray {
            origin,
            direction: direction / n,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Unit ray from the camera center through the center of pixel `(u, v)`.
pub fn pixel_to_ray(u: f64, v: f64, k: &CameraIntrinsics) -> Result<Ray> {
    if !(u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64) {
        return Err(Error::Domain(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            k.width, k.height
        )));
    }
    let d = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    Ok(Ray {
        origin: Vec3::zeros(),
        direction: d.normalize(),
    })
}

/// Camera-frame point at z-depth `depth` seen through pixel `(u, v)`.
/// Not bounds checked, so it also serves sub-pixel and off-image queries.
pub fn back_project(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Vec3 {
    Vec3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth)
}

/// Projects a camera-frame point to `(u, v, z)`.
pub fn project(p: &Vec3, k: &CameraIntrinsics) -> Result<(f64, f64, f64)> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera(p.z));
    }
    Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z))
}

/// Height above the ground plane of the point seen at pixel `(u, v)` with
/// z-depth `depth`.
pub fn pixel_height(u: f64, v: f64, depth: f64, k: &CameraIntrinsics, gf: &GravityFrame) -> Result<f64> {
    if !(depth > 0.0) {
        return Err(Error::Domain(format!("depth must be positive, got {depth}")));
    }
    Ok(gf.height_of(&back_project(u, v, depth, k)))
}

/// Camera placement in the world frame. Yaw turns about the world up axis,
/// positive pitch tilts the optical axis toward the ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub position: Vec3,
    pub yaw: f64,
    pub pitch: f64,
}

impl CameraPose {
    pub fn level(position: Vec3, yaw: f64) -> Self {
        CameraPose {
            position,
            yaw,
            pitch: 0.0,
        }
    }

    /// Rotation taking camera-frame vectors to world-frame vectors.
    pub fn rotation(&self) -> Matrix3<f64> {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let forward = Vec3::new(sy * cp, -sp, cy * cp);
        let right = Vec3::new(cy, 0.0, -sy);
        let down = right.cross(&forward);
        Matrix3::from_columns(&[right, down, forward])
    }

    pub fn cam_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.position
    }

    pub fn dir_to_world(&self, d: &Vec3) -> Vec3 {
        self.rotation() * d
    }

    pub fn world_to_cam(&self, p: &Vec3) -> Vec3 {
        self.rotation().transpose() * (p - self.position)
    }

    pub fn gravity_frame(&self) -> Result<GravityFrame> {
        let g_world = Vec3::new(0.0, -1.0, 0.0);
        let g = (self.rotation().transpose() * g_world).normalize();
        GravityFrame::new(g, self.position.y)
    }
}
