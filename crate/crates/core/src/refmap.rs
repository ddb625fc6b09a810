//! Dense reference depth from a sparse planar scan.
//!
//! The scan is median filtered, linearly imputed at one bearing per image
//! column, lifted to vertical lines through each laser point (a ruled
//! "curtain" parallel to gravity), and rendered into the camera.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{pixel_to_ray, CameraIntrinsics, GravityFrame, Vec3};
use crate::raster::{write_mask_pgm, DepthMap};
use crate::scene_sim::LaserScan;

pub const DEFAULT_MEDIAN_WINDOW: usize = 5;

/// Tolerance for treating a bearing as inside the scanned span.
const SPAN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDepthMap {
    pub depth: DepthMap,
    /// Pixels outside the scanned bearing span, filled by edge extension.
    pub extrapolated: Vec<bool>,
    pub source: String,
    /// Number of imputed bearings the curtain was built from.
    pub resolution: usize,
}

impl ReferenceDepthMap {
    pub fn n_extrapolated(&self) -> usize {
        self.extrapolated.iter().filter(|e| **e).count()
    }

    /// Writes `<stem>.pfm` and the `extrapolated` mask as `<stem>_extrapolated.pgm`.
    pub fn write(&self, pfm_path: &Path) -> Result<()> {
        self.depth.write_pfm(pfm_path)?;
        let stem = pfm_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mask_path = pfm_path.with_file_name(format!("{stem}_extrapolated.pgm"));
        write_mask_pgm(&mask_path, self.depth.width, self.depth.height, &self.extrapolated)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Replaces each valid range by the median of the valid ranges in a window
/// centered on it. Near the ends the window shrinks symmetrically, so
/// monotone scans pass through unchanged.
pub fn median_filter_scan(scan: &LaserScan, window: usize) -> Result<LaserScan> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Domain(format!(
            "median window must be odd and positive, got {window}"
        )));
    }
    let n = scan.len();
    let half = window / 2;
    let mut out = scan.clone();
    let mut buf = Vec::with_capacity(window);
    for i in 0..n {
        if !scan.valid[i] {
            continue;
        }
        let h = half.min(i).min(n - 1 - i);
        buf.clear();
        buf.extend((i - h..=i + h).filter(|&j| scan.valid[j]).map(|j| scan.ranges[j]));
        out.ranges[i] = median(&mut buf);
    }
    Ok(out)
}

/// Linear interpolation of range over bearing between the two nearest valid
/// rays. Every target must lie within the valid bearing span.
pub fn interpolate_scan(scan: &LaserScan, targets: &[f64]) -> Result<LaserScan> {
    let pts: Vec<(f64, f64)> = (0..scan.len())
        .filter(|&i| scan.valid[i])
        .map(|i| (scan.bearings[i], scan.ranges[i]))
        .collect();
    if pts.is_empty() {
        return Err(Error::EmptyScan);
    }
    let (lo, hi) = (pts[0].0, pts[pts.len() - 1].0);
    let mut ranges = Vec::with_capacity(targets.len());
    for &t in targets {
        if !(t >= lo && t <= hi) {
            return Err(Error::Domain(format!("bearing {t} outside scanned span [{lo}, {hi}]")));
        }
        // First valid ray with bearing >= t.
        let j = pts.partition_point(|p| p.0 < t);
        let r = if pts[j].0 == t {
            pts[j].1
        } else {
            let (b0, r0) = pts[j - 1];
            let (b1, r1) = pts[j];
            let w = (t - b0) / (b1 - b0);
            r0 + w * (r1 - r0)
        };
        ranges.push(r);
    }
    LaserScan::new(scan.mount_height, targets.to_vec(), ranges, vec![true; targets.len()])
}

/// Curtain cross-section: valid laser points in the horizontal plane, as
/// `(bearing, right, forward)` with bearings increasing.
struct Curtain {
    pts: Vec<(f64, f64, f64)>,
}

impl Curtain {
    fn from_scan(scan: &LaserScan) -> Result<Self> {
        let pts: Vec<_> = (0..scan.len())
            .filter(|&i| scan.valid[i])
            .map(|i| {
                let (b, r) = (scan.bearings[i], scan.ranges[i]);
                (b, r * b.sin(), r * b.cos())
            })
            .collect();
        if pts.is_empty() {
            return Err(Error::EmptyScan);
        }
        Ok(Curtain { pts })
    }

    fn span(&self) -> (f64, f64) {
        (self.pts[0].0, self.pts[self.pts.len() - 1].0)
    }

    fn contains(&self, azimuth: f64) -> bool {
        let (lo, hi) = self.span();
        azimuth >= lo - SPAN_EPS && azimuth <= hi + SPAN_EPS
    }

    /// Distance along the horizontal direction `(a, b)` (not necessarily
    /// unit) at which it meets the curtain polyline, for an in-span azimuth.
    fn hit_scale(&self, a: f64, b: f64) -> Option<f64> {
        let az = a.atan2(b);
        if !self.contains(az) {
            return None;
        }
        let n = self.pts.len();
        let j = self.pts.partition_point(|p| p.0 < az);
        let on_vertex = j == 0 || j == n || self.pts[j].0 == az;
        let j = j.min(n - 1);
        let (_, x1, y1) = self.pts[j];
        if on_vertex {
            // On a vertex (or a single-point curtain): scale to its radius.
            let s = (x1 * a + y1 * b) / (a * a + b * b);
            return Some(s);
        }
        let (_, x0, y0) = self.pts[j - 1];
        // Solve s*(a,b) = P0 + l*(P1 - P0).
        let (ex, ey) = (x1 - x0, y1 - y0);
        let den = a * ey - b * ex;
        if den.abs() < 1e-15 {
            return None;
        }
        let s = (x0 * ey - y0 * ex) / den;
        (s > 0.0).then_some(s)
    }

    /// Depth scale for directions outside the span: the horizontal radius of
    /// the nearest edge point.
    fn edge_radius(&self, azimuth: f64) -> f64 {
        let (lo, _) = self.span();
        let p = if azimuth < lo {
            self.pts[0]
        } else {
            self.pts[self.pts.len() - 1]
        };
        (p.1 * p.1 + p.2 * p.2).sqrt()
    }
}

/// Renders the curtain through every valid ray of `scan` into the camera.
///
/// A level camera (gravity along +y) takes the column-fill path: every pixel
/// in column `u` receives the depth where the column's azimuth meets the
/// curtain. Any other gravity takes the per-pixel ray/curtain path.
pub fn extrude_and_render(scan: &LaserScan, gf: &GravityFrame, k: &CameraIntrinsics) -> Result<ReferenceDepthMap> {
    gf.horizontal_basis()?;
    let curtain = Curtain::from_scan(scan)?;
    let (depth, extrapolated) = if gf.is_level() {
        render_columns(&curtain, k)
    } else {
        render_rays(&curtain, gf, k)?
    };
    Ok(ReferenceDepthMap {
        depth,
        extrapolated,
        source: String::new(),
        resolution: curtain.pts.len(),
    })
}

/// Per-pixel ray/curtain intersection for an arbitrary gravity direction.
/// Public so the two rendering paths can be compared directly.
pub fn render_ruled_surface(scan: &LaserScan, gf: &GravityFrame, k: &CameraIntrinsics) -> Result<ReferenceDepthMap> {
    let curtain = Curtain::from_scan(scan)?;
    let (depth, extrapolated) = render_rays(&curtain, gf, k)?;
    Ok(ReferenceDepthMap {
        depth,
        extrapolated,
        source: String::new(),
        resolution: curtain.pts.len(),
    })
}

fn render_columns(curtain: &Curtain, k: &CameraIntrinsics) -> (DepthMap, Vec<bool>) {
    let mut col_depth: Vec<Option<f64>> = (0..k.width)
        .map(|u| {
            let a = (u as f64 - k.cx) / k.fx;
            // Direction (a, 1) has unit forward component, so the scale is the z-depth.
            curtain.hit_scale(a, 1.0)
        })
        .collect();
    let in_span: Vec<bool> = col_depth.iter().map(Option::is_some).collect();
    for u in 0..k.width {
        if col_depth[u].is_none() {
            col_depth[u] = Some(nearest_filled(&in_span, u).map_or_else(
                || {
                    let az = k.column_bearing(u as f64);
                    let r = curtain.edge_radius(az);
                    let (lo, hi) = curtain.span();
                    r * az.clamp(lo, hi).cos()
                },
                |src| col_depth[src].unwrap(),
            ));
        }
    }
    let mut depth = DepthMap::invalid(k.width, k.height);
    let mut extrapolated = vec![false; k.width * k.height];
    for v in 0..k.height {
        for u in 0..k.width {
            depth.set(u, v, col_depth[u].unwrap() as f32);
            extrapolated[v * k.width + u] = !in_span[u];
        }
    }
    (depth, extrapolated)
}

fn nearest_filled(filled: &[bool], i: usize) -> Option<usize> {
    (1..filled.len()).find_map(|d| {
        if i >= d && filled[i - d] {
            Some(i - d)
        } else if i + d < filled.len() && filled[i + d] {
            Some(i + d)
        } else {
            None
        }
    })
}

fn render_rays(curtain: &Curtain, gf: &GravityFrame, k: &CameraIntrinsics) -> Result<(DepthMap, Vec<bool>)> {
    let (right, fwd) = gf.horizontal_basis()?;
    let mut depth = DepthMap::invalid(k.width, k.height);
    let mut extrapolated = vec![false; k.width * k.height];
    let mut rows_hit: Vec<Option<f64>> = vec![None; k.width];
    for v in 0..k.height {
        let mut rays: Vec<Vec3> = Vec::with_capacity(k.width);
        for (u, hit) in rows_hit.iter_mut().enumerate() {
            let d = pixel_to_ray(u as f64, v as f64, k)?.direction;
            let (a, b) = (d.dot(&right), d.dot(&fwd));
            *hit = if a * a + b * b > 1e-18 {
                curtain.hit_scale(a, b).map(|s| s * d.z)
            } else {
                None
            };
            rays.push(d);
        }
        let filled: Vec<bool> = rows_hit.iter().map(Option::is_some).collect();
        for u in 0..k.width {
            let i = v * k.width + u;
            let z = match rows_hit[u] {
                Some(z) => z,
                None => {
                    extrapolated[i] = true;
                    match nearest_filled(&filled, u) {
                        Some(src) => rows_hit[src].unwrap(),
                        None => {
                            let d = rays[u];
                            let (a, b) = (d.dot(&right), d.dot(&fwd));
                            let h = (a * a + b * b).sqrt().max(1e-9);
                            curtain.edge_radius(a.atan2(b)) / h * d.z
                        }
                    }
                }
            };
            if z > 0.0 && z.is_finite() {
                depth.set(u, v, z as f32);
            }
        }
    }
    Ok((depth, extrapolated))
}

/// Median filter, impute one range per image column inside the scanned
/// span, then render the curtain.
pub fn build_reference(
    scan: &LaserScan,
    gf: &GravityFrame,
    k: &CameraIntrinsics,
    window: usize,
) -> Result<ReferenceDepthMap> {
    let smoothed = median_filter_scan(scan, window)?;
    let valid: Vec<f64> = (0..smoothed.len())
        .filter(|&i| smoothed.valid[i])
        .map(|i| smoothed.bearings[i])
        .collect();
    let (lo, hi) = match (valid.first(), valid.last()) {
        (Some(lo), Some(hi)) => (*lo, *hi),
        _ => return Err(Error::EmptyScan),
    };
    let mut targets: Vec<f64> = k
        .column_bearings()
        .into_iter()
        .filter(|b| *b >= lo && *b <= hi)
        .collect();
    // Keep the span edges so a scan narrower than one column still renders.
    if targets.first().is_none_or(|b| *b > lo) {
        targets.insert(0, lo);
    }
    if targets.last().is_none_or(|b| *b < hi) {
        targets.push(hi);
    }
    targets.dedup();
    let dense = interpolate_scan(&smoothed, &targets)?;
    extrude_and_render(&dense, gf, k)
}
