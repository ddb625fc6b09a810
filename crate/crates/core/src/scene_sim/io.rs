//! Text encodings for laser scans, camera metadata and scene descriptions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Aabb, LaserScan, Scene, Wall};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, GravityFrame, Vec3};

pub const SCAN_HEADER: &str = "bearing_rad,range_m,valid";

pub fn encode_scan(scan: &LaserScan) -> String {
    let mut s = format!("# mount_height_m={}\n{SCAN_HEADER}\n", scan.mount_height);
    for i in 0..scan.len() {
        let r = if scan.valid[i] { scan.ranges[i] } else { 0.0 };
        writeln!(s, "{},{},{}", scan.bearings[i], r, u8::from(scan.valid[i])).unwrap();
    }
    s
}

pub fn decode_scan(text: &str) -> Result<LaserScan> {
    let bad = |msg: String| Error::format("scan CSV", msg);
    let mut lines = text.lines();
    let meta = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let mount_height: f64 = meta
        .strip_prefix("# mount_height_m=")
        .ok_or_else(|| bad(format!("expected mount height line, got `{meta}`")))?
        .trim()
        .parse()
        .map_err(|_| bad(format!("bad mount height in `{meta}`")))?;
    match lines.next() {
        Some(h) if h.trim() == SCAN_HEADER => {}
        other => return Err(bad(format!("expected header `{SCAN_HEADER}`, got {other:?}"))),
    }
    let (mut bearings, mut ranges, mut valid) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(bad(format!("row {}: expected 3 fields", n + 1)));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("row {}: bad number `{s}`", n + 1)))
        };
        bearings.push(num(f[0])?);
        ranges.push(num(f[1])?);
        valid.push(match f[2] {
            "1" => true,
            "0" => false,
            o => return Err(bad(format!("row {}: bad valid flag `{o}`", n + 1))),
        });
    }
    LaserScan::new(mount_height, bearings, ranges, valid)
}

pub fn write_scan(path: &Path, scan: &LaserScan) -> Result<()> {
    fs::write(path, encode_scan(scan)).map_err(|e| Error::io(path, e))
}

pub fn read_scan(path: &Path) -> Result<LaserScan> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_scan(&text)
}

/// Parses flat `key=value` text; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, kind: &'static str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(kind, format!("expected key=value, got `{line}`")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraMeta {
    pub intrinsics: CameraIntrinsics,
    pub gravity: GravityFrame,
}

pub fn encode_camera_meta(meta: &CameraMeta) -> String {
    let k = &meta.intrinsics;
    let g = &meta.gravity;
    format!(
        "fx={}\nfy={}\ncx={}\ncy={}\nwidth={}\nheight={}\ncamera_height={}\ng_x={}\ng_y={}\ng_z={}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height, g.camera_height, g.g.x, g.g.y, g.g.z
    )
}

pub fn decode_camera_meta(text: &str) -> Result<CameraMeta> {
    let kv = parse_key_values(text, "camera meta")?;
    let get = |key: &str| -> Result<f64> {
        kv.get(key)
            .ok_or_else(|| Error::format("camera meta", format!("missing `{key}`")))?
            .parse::<f64>()
            .map_err(|_| Error::format("camera meta", format!("bad number for `{key}`")))
    };
    let dim = |key: &str| -> Result<usize> {
        kv.get(key)
            .ok_or_else(|| Error::format("camera meta", format!("missing `{key}`")))?
            .parse::<usize>()
            .map_err(|_| Error::format("camera meta", format!("bad integer for `{key}`")))
    };
    let intrinsics = CameraIntrinsics::new(
        get("fx")?,
        get("fy")?,
        get("cx")?,
        get("cy")?,
        dim("width")?,
        dim("height")?,
    )?;
    let gravity = GravityFrame::new(Vec3::new(get("g_x")?, get("g_y")?, get("g_z")?), get("camera_height")?)?;
    Ok(CameraMeta { intrinsics, gravity })
}

pub fn write_camera_meta(path: &Path, meta: &CameraMeta) -> Result<()> {
    fs::write(path, encode_camera_meta(meta)).map_err(|e| Error::io(path, e))
}

pub fn read_camera_meta(path: &Path) -> Result<CameraMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_camera_meta(&text)
}

/// One primitive per line: `ground=<albedo>`, `wall=nx,nz,offset,albedo`,
/// `box=x0,y0,z0,x1,y1,z1,albedo`, plus `pose=x,y,z,yaw,pitch`.
pub fn encode_scene(scene: &Scene, pose: &CameraPose) -> String {
    let mut s = format!("ground={}\n", scene.ground_albedo);
    for w in &scene.walls {
        writeln!(s, "wall={},{},{},{}", w.normal.x, w.normal.z, w.offset, w.albedo).unwrap();
    }
    for b in &scene.boxes {
        writeln!(
            s,
            "box={},{},{},{},{},{},{}",
            b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z, b.albedo
        )
        .unwrap();
    }
    let p = pose.position;
    writeln!(s, "pose={},{},{},{},{}", p.x, p.y, p.z, pose.yaw, pose.pitch).unwrap();
    s
}

pub fn decode_scene(text: &str) -> Result<(Scene, CameraPose)> {
    let bad = |msg: String| Error::format("scene", msg);
    let mut scene = Scene::empty();
    let mut pose = None;
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (key, val) = line.split_once('=').ok_or_else(|| bad(format!("bad line `{line}`")))?;
        let nums: Vec<f64> = val
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad number in `{line}`")))
            })
            .collect::<Result<_>>()?;
        let need = |n: usize| {
            if nums.len() == n {
                Ok(())
            } else {
                Err(bad(format!("`{key}` expects {n} values")))
            }
        };
        match key {
            "ground" => {
                need(1)?;
                scene.ground_albedo = nums[0];
            }
            "wall" => {
                need(4)?;
                scene.walls.push(Wall {
                    normal: Vec3::new(nums[0], 0.0, nums[1]),
                    offset: nums[2],
                    albedo: nums[3],
                });
            }
            "box" => {
                need(7)?;
                scene.boxes.push(Aabb::new(
                    Vec3::new(nums[0], nums[1], nums[2]),
                    Vec3::new(nums[3], nums[4], nums[5]),
                    nums[6],
                ));
            }
            "pose" => {
                need(5)?;
                pose = Some(CameraPose {
                    position: Vec3::new(nums[0], nums[1], nums[2]),
                    yaw: nums[3],
                    pitch: nums[4],
                });
            }
            other => return Err(bad(format!("unknown entry `{other}`"))),
        }
    }
    scene.validate()?;
    Ok((scene, pose.ok_or_else(|| bad("missing pose".into()))?))
}

pub fn write_scene(path: &Path, scene: &Scene, pose: &CameraPose) -> Result<()> {
    fs::write(path, encode_scene(scene, pose)).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<(Scene, CameraPose)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_scene(&text)
}
