//! Low-level perceptual features: Hasler–Süsstrunk colorfulness, a*b*
//! chrominance entropy and mean CIELAB lightness.

use std::path::Path;
use std::sync::OnceLock;

use image::{DynamicImage, GenericImageView};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BINS_PER_AXIS: usize = 32;

/// Weight of the mean term in the colorfulness score.
const MEAN_WEIGHT: f64 = 0.3;

/// Inclusive a*/b* range covered by the chrominance histogram.
const CHROMA_MIN: f64 = -128.0;
const CHROMA_MAX: f64 = 127.0;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image must have at least one pixel (got {width}x{height})")]
    Empty { width: usize, height: usize },
    #[error("pixel buffer holds {got} pixels, expected {expected}")]
    BufferSize { got: usize, expected: usize },
    #[error("bins_per_axis must be at least 1")]
    Bins,
    #[error("decode {path}: {message}")]
    Decode { path: String, message: String },
}

/// 8-bit sRGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty { width, height });
        }
        if pixels.len() != width * height {
            return Err(ImageError::BufferSize { got: pixels.len(), expected: width * height });
        }
        Ok(RgbImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, ImageError> {
        Self::new(width, height, vec![rgb; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    /// Converts a decoded image, compositing any alpha channel over white.
    pub fn from_dynamic(img: &DynamicImage) -> Result<Self, ImageError> {
        let (w, h) = img.dimensions();
        let pixels = if img.color().has_alpha() {
            img.to_rgba8()
                .pixels()
                .map(|p| {
                    let a = p[3] as f64 / 255.0;
                    let over = |c: u8| (c as f64 * a + 255.0 * (1.0 - a)).round().clamp(0.0, 255.0) as u8;
                    [over(p[0]), over(p[1]), over(p[2])]
                })
                .collect()
        } else {
            img.to_rgb8().pixels().map(|p| p.0).collect()
        };
        Self::new(w as usize, h as usize, pixels)
    }

    pub fn open(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path).map_err(|e| ImageError::Decode {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_dynamic(&img)
    }

    pub fn to_image_buffer(&self) -> image::RgbImage {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (dst, src) in buf.pixels_mut().zip(&self.pixels) {
            dst.0 = *src;
        }
        buf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl LabImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }
}

/// Linear-light sRGB → XYZ (D65), IEC 61966-2-1.
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn linear_lut() -> &'static [f64; 256] {
    static LUT: OnceLock<[f64; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut t = [0.0; 256];
        for (i, v) in t.iter_mut().enumerate() {
            let c = i as f64 / 255.0;
            *v = if c <= 0.04045 { c / 12.92 } else { ((c + 0.055) / 1.055).powf(2.4) };
        }
        t
    })
}

fn xyz_of(lin: [f64; 3]) -> [f64; 3] {
    let m = &SRGB_TO_XYZ;
    [
        m[0][0] * lin[0] + m[0][1] * lin[1] + m[0][2] * lin[2],
        m[1][0] * lin[0] + m[1][1] * lin[1] + m[1][2] * lin[2],
        m[2][0] * lin[0] + m[2][1] * lin[1] + m[2][2] * lin[2],
    ]
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Converts one sRGB pixel to CIELAB (D65). The reference white is the
/// image of (1,1,1) under the same matrix, so pure white maps to exactly
/// L*=100, a*=b*=0.
pub fn srgb_pixel_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lut = linear_lut();
    let white = xyz_of([1.0, 1.0, 1.0]);
    let xyz = xyz_of([lut[rgb[0] as usize], lut[rgb[1] as usize], lut[rgb[2] as usize]]);
    let fx = lab_f(xyz[0] / white[0]);
    let fy = lab_f(xyz[1] / white[1]);
    let fz = lab_f(xyz[2] / white[2]);
    let l = (116.0 * fy - 16.0).clamp(0.0, 100.0);
    [l, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn srgb_to_lab(img: &RgbImage) -> LabImage {
    LabImage {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&p| srgb_pixel_to_lab(p)).collect(),
    }
}

/// Opponent-channel moments behind the colorfulness score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpponentStats {
    pub mu_rg: f64,
    pub mu_yb: f64,
    pub sigma_rg: f64,
    pub sigma_yb: f64,
    pub mu_rgyb: f64,
    pub sigma_rgyb: f64,
}

/// Hasler–Süsstrunk M^(3) on raw 0–255 channel values with population
/// standard deviations.
pub fn colorfulness(img: &RgbImage) -> (f64, OpponentStats) {
    let n = img.pixels.len() as f64;
    let opp = |p: &[u8; 3]| {
        let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
        (r - g, 0.5 * (r + g) - b)
    };
    let (sum_rg, sum_yb) = img.pixels.iter().map(opp).fold((0.0, 0.0), |(a, b), (rg, yb)| (a + rg, b + yb));
    let (mu_rg, mu_yb) = (sum_rg / n, sum_yb / n);
    let (ss_rg, ss_yb) = img.pixels.iter().map(opp).fold((0.0, 0.0), |(a, b), (rg, yb)| {
        (a + (rg - mu_rg).powi(2), b + (yb - mu_yb).powi(2))
    });
    let sigma_rg = (ss_rg / n).sqrt();
    let sigma_yb = (ss_yb / n).sqrt();
    let stats = OpponentStats {
        mu_rg,
        mu_yb,
        sigma_rg,
        sigma_yb,
        mu_rgyb: mu_rg.hypot(mu_yb),
        sigma_rgyb: sigma_rg.hypot(sigma_yb),
    };
    (stats.sigma_rgyb + MEAN_WEIGHT * stats.mu_rgyb, stats)
}

/// Index of the uniform chrominance bin holding `v`; out-of-range values
/// land in the edge bins.
pub fn chroma_bin(v: f64, bins_per_axis: usize) -> usize {
    let width = (CHROMA_MAX - CHROMA_MIN) / bins_per_axis as f64;
    let idx = ((v - CHROMA_MIN) / width).floor();
    if idx <= 0.0 {
        0
    } else {
        (idx as usize).min(bins_per_axis - 1)
    }
}

/// Shannon entropy (bits) of the 2-D a*b* histogram.
pub fn color_entropy(lab: &LabImage, bins_per_axis: usize) -> Result<f64, ImageError> {
    if bins_per_axis == 0 {
        return Err(ImageError::Bins);
    }
    let mut hist = vec![0usize; bins_per_axis * bins_per_axis];
    for p in &lab.pixels {
        hist[chroma_bin(p[1], bins_per_axis) * bins_per_axis + chroma_bin(p[2], bins_per_axis)] += 1;
    }
    let total = lab.pixels.len() as f64;
    let h = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

pub fn brightness(lab: &LabImage) -> f64 {
    let n = lab.pixels.len() as f64;
    (lab.pixels.iter().map(|p| p[0]).sum::<f64>() / n).clamp(0.0, 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowLevelFeatures {
    pub colorfulness: f64,
    pub color_entropy_bits: f64,
    pub brightness: f64,
}

pub fn extract_low_level(img: &RgbImage, bins_per_axis: usize) -> Result<LowLevelFeatures, ImageError> {
    let lab = srgb_to_lab(img);
    Ok(LowLevelFeatures {
        colorfulness: colorfulness(img).0,
        color_entropy_bits: color_entropy(&lab, bins_per_axis)?,
        brightness: brightness(&lab),
    })
}
