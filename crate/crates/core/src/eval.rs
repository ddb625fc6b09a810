//! Error metrics, median refinement, height-stratified evaluation and
//! obstacle maps.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{ConfigSection, ConfigWriter, KeyValues};
use crate::error::{Error, Result};
use crate::geometry::{back_project, CameraIntrinsics, CameraPose, GravityFrame};
use crate::raster::DepthMap;
use crate::scene_sim::{raycast_depth, simulate_laser, LaserParams, LaserScan, Scene};

pub const DELTA: f64 = 1.25;
pub const METRICS_HEADER: &str = "metric,value";
pub const BANDS_HEADER: &str = "band_lo_cm,band_hi_cm,rms,rel,log10,d1,d2,d3";
pub const OBSTACLE_HEADER: &str = "bearing_rad,nearest_m,source";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub refine_window: usize,
    /// Lower edge of the first height band, centimeters.
    pub band_start_cm: u32,
    pub band_width_cm: u32,
    pub band_count: usize,
    /// Obstacle height limit, meters.
    pub obstacle_height: f64,
    pub obstacle_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            refine_window: 3,
            band_start_cm: 5,
            band_width_cm: 10,
            band_count: 21,
            obstacle_height: 1.0,
            obstacle_bins: 32,
        }
    }
}

impl ConfigSection for EvalConfig {
    fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take("refine_window", &mut self.refine_window)?;
        kv.take("band_start_cm", &mut self.band_start_cm)?;
        kv.take("band_width_cm", &mut self.band_width_cm)?;
        kv.take("band_count", &mut self.band_count)?;
        kv.take("obstacle_height", &mut self.obstacle_height)?;
        kv.take("obstacle_bins", &mut self.obstacle_bins)
    }

    fn write(&self, w: &mut ConfigWriter) {
        w.section("eval");
        w.put("refine_window", self.refine_window);
        w.put("band_start_cm", self.band_start_cm);
        w.put("band_width_cm", self.band_width_cm);
        w.put("band_count", self.band_count);
        w.put("obstacle_height", self.obstacle_height);
        w.put("obstacle_bins", self.obstacle_bins);
    }

    fn validate(&self) -> Result<()> {
        if self.refine_window.is_multiple_of(2) {
            return Err(Error::Config("refine_window must be odd".into()));
        }
        if self.band_width_cm == 0 || self.band_count == 0 {
            return Err(Error::Config("height bands must be nonempty".into()));
        }
        if !(self.obstacle_height > 0.0) || self.obstacle_bins == 0 {
            return Err(Error::Config("obstacle height and bin count must be positive".into()));
        }
        Ok(())
    }
}

impl EvalConfig {
    pub fn bands(&self) -> Vec<HeightBand> {
        (0..self.band_count as u32)
            .map(|i| HeightBand::from_cm(self.band_start_cm + i * self.band_width_cm, self.band_width_cm))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub rms: f64,
    pub rel: f64,
    pub log10: f64,
    /// Percentages.
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
}

/// Running sums behind a [`MetricsReport`]; sums over disjoint pixel sets
/// add up.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricSums {
    pub sq_err: f64,
    pub rel: f64,
    pub log10: f64,
    pub hits: [usize; 3],
    pub n: usize,
}

impl MetricSums {
    pub fn add(&mut self, pred: f64, gt: f64) {
        let d = pred - gt;
        self.sq_err += d * d;
        self.rel += d.abs() / gt;
        self.log10 += (pred.log10() - gt.log10()).abs();
        let ratio = (pred / gt).max(gt / pred);
        let mut thr = 1.0;
        for h in &mut self.hits {
            thr *= DELTA;
            if ratio < thr {
                *h += 1;
            }
        }
        self.n += 1;
    }

    pub fn merge(&mut self, o: &MetricSums) {
        self.sq_err += o.sq_err;
        self.rel += o.rel;
        self.log10 += o.log10;
        for (a, b) in self.hits.iter_mut().zip(o.hits) {
            *a += b;
        }
        self.n += o.n;
    }

    pub fn report(&self) -> Option<MetricsReport> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        let pct = |h: usize| 100.0 * h as f64 / n;
        Some(MetricsReport {
            rms: (self.sq_err / n).sqrt(),
            rel: self.rel / n,
            log10: self.log10 / n,
            delta1: pct(self.hits[0]),
            delta2: pct(self.hits[1]),
            delta3: pct(self.hits[2]),
            n_pixels: self.n,
        })
    }
}

fn check_pair(pred: &DepthMap, gt: &DepthMap, mask: Option<&[bool]>) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    if mask.is_some_and(|m| m.len() != gt.len()) {
        return Err(Error::Shape("mask size does not match the depth maps".into()));
    }
    Ok(())
}

/// Adds every pixel valid in both maps (and in `mask`, if given) to `sums`.
pub fn accumulate_metrics(sums: &mut MetricSums, pred: &DepthMap, gt: &DepthMap, mask: Option<&[bool]>) -> Result<()> {
    check_pair(pred, gt, mask)?;
    for i in 0..gt.len() {
        if pred.valid[i] && gt.valid[i] && mask.is_none_or(|m| m[i]) {
            sums.add(pred.values[i] as f64, gt.values[i] as f64);
        }
    }
    Ok(())
}

pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, mask: Option<&[bool]>) -> Result<MetricsReport> {
    let mut sums = MetricSums::default();
    accumulate_metrics(&mut sums, pred, gt, mask)?;
    sums.report().ok_or(Error::EmptyMask("metrics"))
}

/// Per-pixel median of the valid pixels in a `window x window`
/// neighborhood. Invalid pixels stay invalid.
pub fn median_refine(pred: &DepthMap, window: usize) -> Result<DepthMap> {
    if window.is_multiple_of(2) {
        return Err(Error::Domain(format!("median window must be odd, got {window}")));
    }
    let r = window / 2;
    let mut out = pred.clone();
    let mut buf = Vec::with_capacity(window * window);
    for v in 0..pred.height {
        for u in 0..pred.width {
            let i = pred.idx(u, v);
            if !pred.valid[i] {
                continue;
            }
            buf.clear();
            for y in v.saturating_sub(r)..(v + r + 1).min(pred.height) {
                for x in u.saturating_sub(r)..(u + r + 1).min(pred.width) {
                    let j = pred.idx(x, y);
                    if pred.valid[j] {
                        buf.push(pred.values[j]);
                    }
                }
            }
            buf.sort_by(f32::total_cmp);
            let n = buf.len();
            out.values[i] = if n % 2 == 1 {
                buf[n / 2]
            } else {
                ((buf[n / 2 - 1] as f64 + buf[n / 2] as f64) / 2.0) as f32
            };
        }
    }
    Ok(out)
}

/// Half-open height interval `(lo, hi]`, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightBand {
    pub lo: f64,
    pub hi: f64,
    pub lo_cm: u32,
    pub hi_cm: u32,
}

impl HeightBand {
    pub fn from_cm(lo_cm: u32, width_cm: u32) -> Self {
        HeightBand {
            lo: lo_cm as f64 / 100.0,
            hi: (lo_cm + width_cm) as f64 / 100.0,
            lo_cm,
            hi_cm: lo_cm + width_cm,
        }
    }

    /// `(lo, hi]` with `hi` possibly infinite.
    pub fn new(lo: f64, hi: f64) -> Self {
        HeightBand {
            lo,
            hi,
            lo_cm: (lo * 100.0).round().max(0.0) as u32,
            hi_cm: if hi.is_finite() {
                (hi * 100.0).round() as u32
            } else {
                u32::MAX
            },
        }
    }

    pub fn contains(&self, h: f64) -> bool {
        h > self.lo && h <= self.hi
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Adds each pixel to the band holding its ground-truth height.
pub fn accumulate_by_height(
    sums: &mut [MetricSums],
    pred: &DepthMap,
    gt: &DepthMap,
    k: &CameraIntrinsics,
    gf: &GravityFrame,
    bands: &[HeightBand],
) -> Result<()> {
    check_pair(pred, gt, None)?;
    if sums.len() != bands.len() {
        return Err(Error::Shape("one accumulator per band required".into()));
    }
    if gt.width != k.width || gt.height != k.height {
        return Err(Error::Shape("depth map does not match the intrinsics".into()));
    }
    for v in 0..gt.height {
        for u in 0..gt.width {
            let i = gt.idx(u, v);
            if !(pred.valid[i] && gt.valid[i]) {
                continue;
            }
            let p = back_project(u as f64, v as f64, gt.values[i] as f64, k);
            let h = gf.height_of(&p);
            if let Some(b) = bands.iter().position(|b| b.contains(h)) {
                sums[b].add(pred.values[i] as f64, gt.values[i] as f64);
            }
        }
    }
    Ok(())
}

/// Per-band metrics; `None` marks an empty band.
pub fn metrics_by_height(
    pred: &DepthMap,
    gt: &DepthMap,
    k: &CameraIntrinsics,
    gf: &GravityFrame,
    bands: &[HeightBand],
) -> Result<Vec<Option<MetricsReport>>> {
    if bands.is_empty() {
        return Err(Error::Domain("no height bands".into()));
    }
    for (i, a) in bands.iter().enumerate() {
        if !(a.hi > a.lo) {
            return Err(Error::Domain(format!("band {i} is empty or inverted")));
        }
        for b in &bands[i + 1..] {
            if a.lo < b.hi && b.lo < a.hi {
                return Err(Error::Domain("height bands overlap".into()));
            }
        }
    }
    let mut sums = vec![MetricSums::default(); bands.len()];
    accumulate_by_height(&mut sums, pred, gt, k, gf, bands)?;
    Ok(sums.iter().map(MetricSums::report).collect())
}

pub fn metrics_csv(r: &MetricsReport) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for (name, v) in [
        ("rms", r.rms),
        ("rel", r.rel),
        ("log10", r.log10),
        ("d1", r.delta1),
        ("d2", r.delta2),
        ("d3", r.delta3),
    ] {
        let _ = writeln!(s, "{name},{v}");
    }
    let _ = writeln!(s, "n_pixels,{}", r.n_pixels);
    s
}

/// Per-band CSV; empty bands carry `nan` in every metric column.
pub fn bands_csv(bands: &[HeightBand], reports: &[Option<MetricsReport>]) -> String {
    let mut s = format!("{BANDS_HEADER}\n");
    for (b, r) in bands.iter().zip(reports) {
        match r {
            Some(r) => {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    b.lo_cm, b.hi_cm, r.rms, r.rel, r.log10, r.delta1, r.delta2, r.delta3
                );
            }
            None => {
                let _ = writeln!(s, "{},{},nan,nan,nan,nan,nan,nan", b.lo_cm, b.hi_cm);
            }
        }
    }
    s
}

/// Points this close to the floor count as floor. Depth is stored in f32,
/// so floor returns scatter around zero height by a few micrometers.
pub const FLOOR_TOLERANCE: f64 = 1e-3;

/// Nearest planar obstacle distance per bearing bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleMap {
    /// Bin centers, radians, positive to the right.
    pub bearings: Vec<f64>,
    /// `None` marks an empty bin.
    pub nearest: Vec<Option<f64>>,
    pub height_max: f64,
    fov: f64,
}

impl ObstacleMap {
    pub fn empty(fov: f64, n_bins: usize, height_max: f64) -> Result<Self> {
        if n_bins == 0 || !(fov > 0.0) {
            return Err(Error::Domain(
                "obstacle map needs a positive field of view and bins".into(),
            ));
        }
        if !(height_max > 0.0) {
            return Err(Error::Domain(format!(
                "obstacle height limit must be positive, got {height_max}"
            )));
        }
        let w = fov / n_bins as f64;
        Ok(ObstacleMap {
            bearings: (0..n_bins).map(|i| -fov / 2.0 + (i as f64 + 0.5) * w).collect(),
            nearest: vec![None; n_bins],
            height_max,
            fov,
        })
    }

    pub fn len(&self) -> usize {
        self.nearest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nearest.is_empty()
    }

    /// Bin of a bearing; bearings outside the field of view have none.
    pub fn bin_of(&self, bearing: f64) -> Option<usize> {
        let half = self.fov / 2.0;
        if !(bearing >= -half && bearing <= half) {
            return None;
        }
        let i = ((bearing + half) / self.fov * self.len() as f64).floor() as usize;
        Some(i.min(self.len() - 1))
    }

    /// Records a point at `height` if it lies above the floor and at most
    /// `height_max`.
    pub fn insert(&mut self, bearing: f64, distance: f64, height: f64) {
        if !(height > FLOOR_TOLERANCE && height <= self.height_max && distance > 0.0) {
            return;
        }
        if let Some(b) = self.bin_of(bearing) {
            let slot = &mut self.nearest[b];
            if slot.is_none_or(|d| distance < d) {
                *slot = Some(distance);
            }
        }
    }

    pub fn n_occupied(&self) -> usize {
        self.nearest.iter().filter(|d| d.is_some()).count()
    }

    pub fn csv_rows(&self, source: &str, out: &mut String) {
        for (b, d) in self.bearings.iter().zip(&self.nearest) {
            match d {
                Some(d) => {
                    let _ = writeln!(out, "{b},{d},{source}");
                }
                None => {
                    let _ = writeln!(out, "{b},nan,{source}");
                }
            }
        }
    }
}

/// Down-projects every valid pixel with height in `(0, m]` and keeps the
/// nearest planar distance per bearing bin over the camera's field of view.
pub fn obstacle_map(
    depth: &DepthMap,
    k: &CameraIntrinsics,
    gf: &GravityFrame,
    m: f64,
    n_bins: usize,
) -> Result<ObstacleMap> {
    obstacle_map_over(depth, k, gf, m, n_bins, k.hfov())
}

/// [`obstacle_map`] with bins spread over an explicit field of view.
pub fn obstacle_map_over(
    depth: &DepthMap,
    k: &CameraIntrinsics,
    gf: &GravityFrame,
    m: f64,
    n_bins: usize,
    fov: f64,
) -> Result<ObstacleMap> {
    if depth.width != k.width || depth.height != k.height {
        return Err(Error::Shape("depth map does not match the intrinsics".into()));
    }
    let mut map = ObstacleMap::empty(fov, n_bins, m)?;
    let (right, fwd) = gf.horizontal_basis()?;
    for v in 0..depth.height {
        for u in 0..depth.width {
            let Some(z) = depth.get(u, v) else {
                continue;
            };
            let p = back_project(u as f64, v as f64, z as f64, k);
            let (x, f) = (p.dot(&right), p.dot(&fwd));
            map.insert(x.atan2(f), x.hypot(f), gf.height_of(&p));
        }
    }
    Ok(map)
}

/// Obstacle map of a horizontal scan: every valid return is a point at the
/// mount height.
pub fn obstacle_map_from_scan(scan: &LaserScan, fov: f64, m: f64, n_bins: usize) -> Result<ObstacleMap> {
    let mut map = ObstacleMap::empty(fov, n_bins, m)?;
    for i in 0..scan.len() {
        if scan.valid[i] {
            map.insert(scan.bearings[i], scan.ranges[i], scan.mount_height);
        }
    }
    Ok(map)
}

/// Margin by which a scan may exceed the dense map before a bin counts as
/// a miss, meters.
pub const MISS_MARGIN: f64 = 0.25;

/// Bins where `dense` sees an obstacle that `sparse` misses or places
/// more than [`MISS_MARGIN`] farther away.
pub fn missed_bins(sparse: &ObstacleMap, dense: &ObstacleMap) -> Vec<usize> {
    (0..dense.len())
        .filter(|&i| match (sparse.nearest[i], dense.nearest[i]) {
            (_, None) => false,
            (None, Some(_)) => true,
            (Some(s), Some(d)) => s > d + MISS_MARGIN,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaserObstacles {
    pub height: f64,
    pub map: ObstacleMap,
    pub missed_vs_predicted: Vec<usize>,
    pub missed_vs_truth: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleComparison {
    pub lasers: Vec<LaserObstacles>,
    pub predicted: ObstacleMap,
    pub truth: ObstacleMap,
}

impl ObstacleComparison {
    pub fn csv(&self) -> String {
        let mut s = format!("{OBSTACLE_HEADER}\n");
        for l in &self.lasers {
            l.map
                .csv_rows(&format!("laser_{}cm", (l.height * 100.0).round()), &mut s);
        }
        self.predicted.csv_rows("predicted", &mut s);
        self.truth.csv_rows("ground_truth", &mut s);
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("laser_height_cm,occupied_bins,missed_vs_predicted,missed_vs_truth\n");
        for l in &self.lasers {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                (l.height * 100.0).round(),
                l.map.n_occupied(),
                l.missed_vs_predicted.len(),
                l.missed_vs_truth.len()
            );
        }
        s
    }
}

/// Builds obstacle maps from noise-free scans at each height, from a
/// predicted dense depth map and from ray-cast ground truth.
///
/// `predicted` may be at full or at an integer-downscaled resolution; it is
/// back-projected through matching intrinsics and binned over the
/// full-resolution field of view.
#[allow(clippy::too_many_arguments)]
pub fn compare_obstacle_sources(
    scene: &Scene,
    pose: &CameraPose,
    k: &CameraIntrinsics,
    heights: &[f64],
    predicted: &DepthMap,
    m: f64,
    n_bins: usize,
    max_range: f64,
) -> Result<ObstacleComparison> {
    let gf = pose.gravity_frame()?;
    let truth_depth = raycast_depth(scene, pose, k, max_range);
    let truth = obstacle_map(&truth_depth, k, &gf, m, n_bins)?;
    let pk = if predicted.width == k.width && predicted.height == k.height {
        *k
    } else if predicted.width > 0
        && k.width.is_multiple_of(predicted.width)
        && k.width / predicted.width * predicted.height == k.height
    {
        k.downscaled(k.width / predicted.width)
    } else {
        return Err(Error::Shape("predicted depth does not match the camera".into()));
    };
    let pred_map = obstacle_map_over(predicted, &pk, &gf, m, n_bins, k.hfov())?;
    let mut lasers = Vec::with_capacity(heights.len());
    for &h in heights {
        let params = LaserParams {
            mount_height: h,
            fov: k.hfov(),
            n_rays: 8 * n_bins + 1,
            noise_sigma: 0.0,
            dropout_p: 0.0,
            max_range,
        };
        let scan = simulate_laser(scene, pose, &params, 0)?;
        let map = obstacle_map_from_scan(&scan, k.hfov(), m, n_bins)?;
        lasers.push(LaserObstacles {
            height: h,
            missed_vs_predicted: missed_bins(&map, &pred_map),
            missed_vs_truth: missed_bins(&map, &truth),
            map,
        });
    }
    Ok(ObstacleComparison {
        lasers,
        predicted: pred_map,
        truth,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
