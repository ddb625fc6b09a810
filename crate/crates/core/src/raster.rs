//! Depth and gray rasters with their on-disk PFM / PGM encodings.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Value written to PFM files for pixels without a depth.
pub const PFM_INVALID: f32 = -1.0;

/// Dense per-pixel metric depth with a validity mask. Row-major, row 0 at
/// the top of the image.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, depth: f32) -> Self {
        DepthMap {
            width,
            height,
            values: vec![depth; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} depth map",
                values.len()
            )));
        }
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Ok(DepthMap {
            width,
            height,
            values,
            valid,
        })
    }

    #[inline]
    pub fn idx(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f32> {
        let i = self.idx(u, v);
        self.valid[i].then(|| self.values[i])
    }

    pub fn set(&mut self, u: usize, v: usize, depth: f32) {
        let i = self.idx(u, v);
        self.values[i] = depth;
        self.valid[i] = true;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn same_shape(&self, other: &DepthMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Checks that valid pixels hold depths in `(0, max_range]`.
    pub fn check_invariants(&self, max_range: f32) -> Result<()> {
        if self.values.len() != self.width * self.height || self.valid.len() != self.values.len() {
            return Err(Error::Shape("depth map buffers disagree with its size".into()));
        }
        for (i, (&d, &ok)) in self.values.iter().zip(&self.valid).enumerate() {
            if ok && !(d > 0.0 && d <= max_range) {
                return Err(Error::Domain(format!(
                    "pixel {i} holds depth {d} outside (0, {max_range}]"
                )));
            }
        }
        Ok(())
    }

    pub fn flip_horizontal(&self) -> DepthMap {
        DepthMap {
            width: self.width,
            height: self.height,
            values: flip_rows(&self.values, self.width),
            valid: flip_rows(&self.valid, self.width),
        }
    }

    /// Bilinear resampling with half-pixel centers over valid pixels only.
    /// Output pixels whose support holds no valid input stay invalid.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> DepthMap {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = DepthMap::invalid(width, height);
        for v in 0..height {
            let fy = ((v as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for u in 0..width {
                let fx = ((u as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let taps = [
                    (x0, y0, (1.0 - wx) * (1.0 - wy)),
                    (x1, y0, wx * (1.0 - wy)),
                    (x0, y1, (1.0 - wx) * wy),
                    (x1, y1, wx * wy),
                ];
                let (mut acc, mut wsum) = (0.0f64, 0.0f64);
                for (x, y, w) in taps {
                    let i = self.idx(x, y);
                    if self.valid[i] && w > 0.0 {
                        acc += w * self.values[i] as f64;
                        wsum += w;
                    }
                }
                if wsum > 0.0 {
                    out.set(u, v, (acc / wsum) as f32);
                }
            }
        }
        out
    }

    /// Nearest-neighbor resampling (pixel-center mapping); values and
    /// validity are copied, never blended.
    pub fn resize_nearest(&self, width: usize, height: usize) -> DepthMap {
        let mut out = DepthMap::invalid(width, height);
        for v in 0..height {
            let sv = (((v as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for u in 0..width {
                let su = (((u as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                let si = self.idx(su, sv);
                let di = out.idx(u, v);
                out.values[di] = self.values[si];
                out.valid[di] = self.valid[si];
            }
        }
        out
    }

    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        let bytes = encode_pfm(self);
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_pfm(path: &Path) -> Result<DepthMap> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_pfm(&bytes)
    }
}

pub(crate) fn flip_rows<T: Copy>(data: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(width) {
        out.extend(row.iter().rev());
    }
    out
}

/// Encodes a depth map as a little-endian grayscale PFM, bottom row first.
pub fn encode_pfm(map: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 4 * map.len());
    write!(out, "Pf\n{} {}\n-1.0\n", map.width, map.height).unwrap();
    for v in (0..map.height).rev() {
        for u in 0..map.width {
            let i = map.idx(u, v);
            let x = if map.valid[i] { map.values[i] } else { PFM_INVALID };
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap> {
    let (tokens, body) = header_tokens(bytes, 4, "PFM")?;
    if tokens[0] != "Pf" {
        return Err(Error::format(
            "PFM",
            format!("expected `Pf` magic, got `{}`", tokens[0]),
        ));
    }
    let width = parse_dim(&tokens[1], "PFM")?;
    let height = parse_dim(&tokens[2], "PFM")?;
    let scale: f32 = tokens[3]
        .parse()
        .map_err(|_| Error::format("PFM", format!("bad scale `{}`", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format("PFM", "scale must be nonzero"));
    }
    let little = scale < 0.0;
    let n = width * height;
    if body.len() != 4 * n {
        return Err(Error::format(
            "PFM",
            format!("expected {} payload bytes, found {}", 4 * n, body.len()),
        ));
    }
    let mut map = DepthMap::invalid(width, height);
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let x = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (u, row_from_bottom) = (k % width, k / width);
        let v = height - 1 - row_from_bottom;
        if x.is_finite() && x > 0.0 {
            map.set(u, v, x);
        }
    }
    Ok(map)
}

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    pub fn flip_horizontal(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: flip_rows(&self.data, self.width),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height {
            return Err(Error::Shape(format!(
                "{} bytes for a {width}x{height} image",
                bytes.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data: bytes.iter().map(|b| *b as f32 / 255.0).collect(),
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, encode_pgm(self.width, self.height, &self.to_bytes())).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<GrayImage> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, h, px) = decode_pgm(&bytes)?;
        GrayImage::from_bytes(w, h, &px)
    }
}

/// Binary 8-bit PGM (`P5`).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + pixels.len());
    write!(out, "P5\n{width} {height}\n255\n").unwrap();
    out.extend_from_slice(pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (tokens, body) = header_tokens(bytes, 4, "PGM")?;
    if tokens[0] != "P5" {
        return Err(Error::format(
            "PGM",
            format!("expected `P5` magic, got `{}`", tokens[0]),
        ));
    }
    let width = parse_dim(&tokens[1], "PGM")?;
    let height = parse_dim(&tokens[2], "PGM")?;
    if tokens[3] != "255" {
        return Err(Error::format(
            "PGM",
            format!("only maxval 255 is supported, got {}", tokens[3]),
        ));
    }
    if body.len() != width * height {
        return Err(Error::format(
            "PGM",
            format!("expected {} pixels, found {}", width * height, body.len()),
        ));
    }
    Ok((width, height, body.to_vec()))
}

pub fn write_mask_pgm(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let px: Vec<u8> = mask.iter().map(|m| if *m { 255 } else { 0 }).collect();
    fs::write(path, encode_pgm(width, height, &px)).map_err(|e| Error::io(path, e))
}

/// Splits a netpbm-style header into `n` whitespace tokens (skipping `#`
/// comments) and returns the payload after the single separator byte.
fn header_tokens<'a>(bytes: &'a [u8], n: usize, kind: &'static str) -> Result<(Vec<String>, &'a [u8])> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(kind, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::format(kind, "missing payload"));
    }
    Ok((tokens, &bytes[i + 1..]))
}

fn parse_dim(s: &str, kind: &'static str) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(d) if d > 0 => Ok(d),
        _ => Err(Error::format(kind, format!("bad dimension `{s}`"))),
    }
}
