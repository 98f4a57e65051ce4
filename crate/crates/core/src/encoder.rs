//! Training-free per-cell descriptor used as the frame feature extractor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

/// Number of channels produced by [`encode_frame`].
pub const FEATURE_CHANNELS: usize = 8;

/// 8-bit RGB frame. Channel values are exposed in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::shape(
                format!("{width}x{height}x3"),
                format!("{} bytes", rgb.len()),
            ));
        }
        Ok(Self { width, height, rgb })
    }

    /// Builds a frame from `[0, 1]` colors, quantizing to 8 bits.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for v in f(x, y) {
                    rgb.push(quantize(v));
                }
            }
        }
        Self { width, height, rgb }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bytes(&self) -> &[u8] {
        &self.rgb
    }

    pub fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [
            f64::from(self.rgb[i]) / 255.0,
            f64::from(self.rgb[i + 1]) / 255.0,
            f64::from(self.rgb[i + 2]) / 255.0,
        ]
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub stride: usize,
    pub position_weight: f64,
    pub normalize: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stride: 8,
            position_weight: 0.5,
            normalize: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("encoder.stride must be at least 1".into()));
        }
        if !(self.position_weight >= 0.0 && self.position_weight.is_finite()) {
            return Err(Error::Config("encoder.position_weight must be >= 0".into()));
        }
        Ok(())
    }

    /// Grid dimensions (rows, cols) for an image, after bottom/right padding.
    pub fn grid_dims(&self, width: usize, height: usize) -> (usize, usize) {
        (height.div_ceil(self.stride), width.div_ceil(self.stride))
    }
}

fn luminance([r, g, b]: [f64; 3]) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Per-cell descriptor: mean RGB, mean luminance gradient magnitude, two
/// cell-center position channels scaled by `position_weight`, and two bias
/// channels (`0.5` and `1 - position_weight` clamped to `[0, 1]`).
///
/// The image is zero-padded on the bottom/right up to a multiple of the
/// stride. Gradients are central differences on the padded luminance with
/// edge pixels replicated.
pub fn encode_frame(frame: &Frame, cfg: &EncoderConfig) -> Result<FeatureGrid> {
    cfg.validate()?;
    if frame.width == 0 || frame.height == 0 {
        return Err(Error::Input("frame has zero size".into()));
    }
    let s = cfg.stride;
    let (gh, gw) = cfg.grid_dims(frame.width, frame.height);
    let (ph, pw) = (gh * s, gw * s);

    let mut rgb = vec![[0.0f64; 3]; ph * pw];
    for y in 0..frame.height {
        for x in 0..frame.width {
            rgb[y * pw + x] = frame.rgb(x, y);
        }
    }
    let lum: Vec<f64> = rgb.iter().map(|&p| luminance(p)).collect();
    let at = |y: usize, x: usize| lum[y * pw + x];

    let w = cfg.position_weight;
    let bias = (1.0 - w).clamp(0.0, 1.0);
    let area = (s * s) as f64;
    let mut data = Vec::with_capacity(gh * gw * FEATURE_CHANNELS);

    for r in 0..gh {
        for c in 0..gw {
            let mut acc = [0.0f64; 4];
            for y in r * s..(r + 1) * s {
                for x in c * s..(c + 1) * s {
                    let p = rgb[y * pw + x];
                    acc[0] += p[0];
                    acc[1] += p[1];
                    acc[2] += p[2];
                    let gx = (at(y, (x + 1).min(pw - 1)) - at(y, x.saturating_sub(1))) / 2.0;
                    let gy = (at((y + 1).min(ph - 1), x) - at(y.saturating_sub(1), x)) / 2.0;
                    acc[3] += gx.hypot(gy);
                }
            }
            let mut v = [
                acc[0] / area,
                acc[1] / area,
                acc[2] / area,
                acc[3] / area,
                (r as f64 + 0.5) / gh as f64 * w,
                (c as f64 + 0.5) / gw as f64 * w,
                0.5,
                bias,
            ];
            if cfg.normalize {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    v = [0.0; FEATURE_CHANNELS];
                    v[6] = 1.0;
                } else {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
            }
            data.extend_from_slice(&v);
        }
    }
    FeatureGrid::new(gh, gw, FEATURE_CHANNELS, s, data)
}
