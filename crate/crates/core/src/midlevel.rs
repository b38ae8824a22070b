//! Compositional metrics over a precomputed saliency map: top-p mass area,
//! normalized saliency entropy, center bias index and rule-of-thirds
//! hotspot coverage.
//!
//! Coordinates: row `i` in `0..height`, column `j` in `0..width`; each pixel
//! sits at its integer coordinate.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack on the cumulative-mass comparison in `top_p_mass_area`; sums of
/// normalized values drift below exact targets by a few ulps.
pub const MASS_EPS: f64 = 1e-12;

const RAW_HEADER_LEN: usize = 8;
const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("zero total saliency mass")]
    ZeroMass,
    #[error("saliency map is {got:?} (HxW), expected {expected:?}")]
    Shape { got: (usize, usize), expected: (usize, usize) },
    #[error("saliency map must have at least one pixel")]
    Empty,
    #[error("value buffer holds {got} values, expected {expected}")]
    BufferSize { got: usize, expected: usize },
    #[error("normalized entropy is undefined for a single-pixel map")]
    SinglePixel,
    #[error("{name} = {value} outside {range}")]
    Parameter { name: &'static str, value: f64, range: &'static str },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Nonnegative map normalized to unit mass, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    /// Clamps negatives (and NaN) to zero and divides by the total.
    pub fn from_raw(height: usize, width: usize, raw: Vec<f64>) -> Result<Self, SaliencyError> {
        if height == 0 || width == 0 {
            return Err(SaliencyError::Empty);
        }
        if raw.len() != height * width {
            return Err(SaliencyError::BufferSize { got: raw.len(), expected: height * width });
        }
        let clamped: Vec<f64> = raw.into_iter().map(|v| if v > 0.0 && v.is_finite() { v } else { 0.0 }).collect();
        let total: f64 = clamped.iter().sum();
        if total <= 0.0 {
            return Err(SaliencyError::ZeroMass);
        }
        Ok(SaliencyMap { height, width, values: clamped.into_iter().map(|v| v / total).collect() })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }
}

/// Loads an 8/16-bit grayscale PNG or a raw little-endian float32 map with an
/// 8-byte header (u32 height, u32 width). `expected_dims` is `(height, width)`.
pub fn load_saliency(path: &Path, expected_dims: Option<(usize, usize)>) -> Result<SaliencyMap, SaliencyError> {
    let bytes = fs::read(path).map_err(|e| SaliencyError::Io { path: path.display().to_string(), source: e })?;
    let fmt_err = |message: String| SaliencyError::Format { path: path.display().to_string(), message };
    let (h, w, raw) = if bytes.starts_with(PNG_MAGIC) {
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| fmt_err(e.to_string()))?;
        match img.color() {
            image::ColorType::L8 | image::ColorType::L16 => {}
            other => return Err(fmt_err(format!("expected grayscale PNG, found {other:?}"))),
        }
        let luma = img.to_luma16();
        let (w, h) = luma.dimensions();
        (h as usize, w as usize, luma.into_raw().into_iter().map(f64::from).collect())
    } else {
        decode_raw(&bytes).map_err(fmt_err)?
    };
    if let Some(expected) = expected_dims {
        if expected != (h, w) {
            return Err(SaliencyError::Shape { got: (h, w), expected });
        }
    }
    SaliencyMap::from_raw(h, w, raw)
}

fn decode_raw(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), String> {
    if bytes.len() < RAW_HEADER_LEN {
        return Err("raw saliency file shorter than its header".into());
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[RAW_HEADER_LEN..];
    if body.len() != h * w * 4 {
        return Err(format!("raw body holds {} bytes, header declares {h}x{w} float32", body.len()));
    }
    let vals = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok((h, w, vals))
}

/// Encodes values in the raw float32 format read by [`load_saliency`].
pub fn encode_raw(height: usize, width: usize, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + values.len() * 4);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MidLevelConfig {
    pub p: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MidLevelConfig {
    fn default() -> Self {
        MidLevelConfig { p: 0.85, alpha: 0.20, beta: 0.10 }
    }
}

impl MidLevelConfig {
    pub fn validate(&self) -> Result<(), SaliencyError> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(SaliencyError::Parameter { name: "p", value: self.p, range: "(0, 1]" });
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(SaliencyError::Parameter { name: "alpha", value: self.alpha, range: "(0, inf)" });
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(SaliencyError::Parameter { name: "beta", value: self.beta, range: "(0, inf)" });
        }
        Ok(())
    }
}

/// Fraction of pixels needed to accumulate `p` of the mass, taking pixels in
/// descending saliency order (ties by row-major index).
pub fn top_p_mass_area(map: &SaliencyMap, p: f64) -> f64 {
    let mut order: Vec<usize> = (0..map.values.len()).collect();
    order.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut k = order.len();
    for (m, &idx) in order.iter().enumerate() {
        cum += map.values[idx];
        if cum >= p - MASS_EPS {
            k = m + 1;
            break;
        }
    }
    k as f64 / map.values.len() as f64
}

/// Shannon entropy (natural log) divided by ln N.
pub fn saliency_entropy(map: &SaliencyMap) -> Result<f64, SaliencyError> {
    let n = map.values.len();
    if n < 2 {
        return Err(SaliencyError::SinglePixel);
    }
    let h: f64 = map.values.iter().filter(|&&s| s > 0.0).map(|&s| -s * s.ln()).sum();
    Ok((h / (n as f64).ln()).clamp(0.0, 1.0))
}

fn disk_mass(map: &SaliencyMap, centers: &[(f64, f64)], radius: f64) -> f64 {
    let r2 = radius * radius;
    let mut mass = 0.0;
    for i in 0..map.height {
        for j in 0..map.width {
            let inside = centers.iter().any(|&(ci, cj)| {
                let (di, dj) = (i as f64 - ci, j as f64 - cj);
                di * di + dj * dj <= r2
            });
            if inside {
                mass += map.at(i, j);
            }
        }
    }
    mass.clamp(0.0, 1.0)
}

/// Mass inside the closed disk of radius `alpha * min(H, W)` around
/// ((H-1)/2, (W-1)/2).
pub fn center_bias_index(map: &SaliencyMap, alpha: f64) -> f64 {
    let (h, w) = (map.height as f64, map.width as f64);
    disk_mass(map, &[((h - 1.0) / 2.0, (w - 1.0) / 2.0)], alpha * h.min(w))
}

/// The four rule-of-thirds intersections (row, col).
pub fn thirds_points(height: usize, width: usize) -> [(f64, f64); 4] {
    let (h, w) = (height as f64, width as f64);
    [(h / 3.0, w / 3.0), (h / 3.0, 2.0 * w / 3.0), (2.0 * h / 3.0, w / 3.0), (2.0 * h / 3.0, 2.0 * w / 3.0)]
}

/// Mass inside the union of closed disks of radius `beta * min(H, W)` at the
/// thirds intersections; overlapping pixels count once.
pub fn thirds_coverage(map: &SaliencyMap, beta: f64) -> f64 {
    let (h, w) = (map.height as f64, map.width as f64);
    disk_mass(map, &thirds_points(map.height, map.width), beta * h.min(w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MidLevelFeatures {
    pub a_at_p: f64,
    pub h_sal: f64,
    pub cbi: f64,
    pub t3: f64,
}

pub fn extract_mid_level(map: &SaliencyMap, cfg: &MidLevelConfig) -> Result<MidLevelFeatures, SaliencyError> {
    cfg.validate()?;
    Ok(MidLevelFeatures {
        a_at_p: top_p_mass_area(map, cfg.p),
        h_sal: saliency_entropy(map)?,
        cbi: center_bias_index(map, cfg.alpha),
        t3: thirds_coverage(map, cfg.beta),
    })
}
