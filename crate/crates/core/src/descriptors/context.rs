//! Built-in dense context features, used in place of a vision foundation
//! model when no external feature map is supplied.
//!
//! Each cell describes the neighbourhood layout around its position: a
//! contrast-normalised, heavily blurred intensity map is read at the cell
//! centre and on rings of eight directions. Channels are standardised over
//! the map, so global gain, offset and most of a gamma change drop out.

use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    /// Image pixels per feature cell.
    pub stride: usize,
    /// Working-resolution reduction before filtering.
    pub downsample: usize,
    /// Blur applied at full resolution scale (pixels).
    pub blur_sigma: f64,
    /// Ring radii in full-resolution pixels.
    pub ring_radii: Vec<f64>,
    /// Directions sampled per ring.
    pub directions: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            stride: 8,
            downsample: 4,
            blur_sigma: 10.0,
            ring_radii: vec![28.0, 56.0, 96.0],
            directions: 8,
        }
    }
}

impl ContextConfig {
    pub fn channels(&self) -> usize {
        1 + self.ring_radii.len() * self.directions
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.downsample == 0 || self.directions == 0 {
            return Err(Error::Argument(
                "context: stride, downsample and directions must be positive".into(),
            ));
        }
        if !(self.blur_sigma > 0.0) || self.ring_radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Argument("context: blur and ring radii must be positive".into()));
        }
        Ok(())
    }
}

/// Percentile of a sample (nearest rank on a sorted copy).
fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((v.len() - 1) as f64 * q).round() as usize;
    v[idx]
}

pub fn context_feature_map(image: &Image, cfg: &ContextConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    if image.width() < cfg.stride || image.height() < cfg.stride {
        return Err(Error::Argument("image smaller than one feature cell".into()));
    }
    let ds = cfg.downsample as f64;
    let small = image.downsample(cfg.downsample);

    let lo = percentile(small.data(), 0.5);
    let hi = percentile(small.data(), 0.995);
    let span = (hi - lo).max(1e-9);
    let normalised = small.map(|v| ((v - lo) / span).clamp(0.0, 1.0));
    let density = normalised.gaussian_blur(cfg.blur_sigma / ds);

    // The last cell sits at or beyond the last pixel.
    let width = (image.width() - 1).div_ceil(cfg.stride) + 1;
    let height = (image.height() - 1).div_ceil(cfg.stride) + 1;
    let channels = cfg.channels();
    let offsets: Vec<(f64, f64)> = std::iter::once((0.0, 0.0))
        .chain(cfg.ring_radii.iter().flat_map(|&r| {
            (0..cfg.directions).map(move |k| {
                let a = std::f64::consts::TAU * k as f64 / cfg.directions as f64;
                (r * a.cos(), r * a.sin())
            })
        }))
        .collect();

    let mut raw = vec![0.0f64; width * height * channels];
    for r in 0..height {
        for c in 0..width {
            let (x, y) = ((c * cfg.stride) as f64, (r * cfg.stride) as f64);
            let base = (r * width + c) * channels;
            for (k, (ox, oy)) in offsets.iter().enumerate() {
                // Pixel centres of the reduced image sit at (i + 0.5)·ds − 0.5.
                let sx = (x + ox + 0.5) / ds - 0.5;
                let sy = (y + oy + 0.5) / ds - 0.5;
                raw[base + k] = density.sample(sx, sy);
            }
        }
    }

    let cells = (width * height) as f64;
    let scale = 1.0 / (channels as f64).sqrt();
    for k in 0..channels {
        let mean = (0..width * height).map(|i| raw[i * channels + k]).sum::<f64>() / cells;
        let var = (0..width * height)
            .map(|i| (raw[i * channels + k] - mean).powi(2))
            .sum::<f64>()
            / cells;
        let inv = if var > 1e-18 { scale / var.sqrt() } else { 0.0 };
        for i in 0..width * height {
            raw[i * channels + k] = (raw[i * channels + k] - mean) * inv;
        }
    }

    FeatureMap::new(
        height,
        width,
        channels,
        cfg.stride as f32,
        raw.into_iter().map(|v| v as f32).collect(),
    )
}
