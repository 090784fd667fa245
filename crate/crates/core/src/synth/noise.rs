//! Flow corruption emulating an imperfect motion estimator.

use std::f64::consts::TAU;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::CorrespondenceField;
use crate::rng::{normal, rng_from, tag};

/// Side of the square outlier blocks (pixels).
pub const OUTLIER_BLOCK: usize = 4;
/// Standard deviation of the Gaussian filter applied to the white noise.
pub const NOISE_SMOOTHING: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowNoise {
    /// Per-axis standard deviation of the smooth noise (pixels).
    pub sigma: f64,
    /// Fraction of pixels covered by outlier blocks.
    pub outlier_fraction: f64,
    /// Displacement added inside an outlier block (pixels).
    pub outlier_magnitude: f64,
}

impl Default for FlowNoise {
    fn default() -> Self {
        FlowNoise { sigma: 0.5, outlier_fraction: 0.02, outlier_magnitude: 10.0 }
    }
}

impl FlowNoise {
    pub fn none() -> Self {
        FlowNoise { sigma: 0.0, outlier_fraction: 0.0, outlier_magnitude: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid("flow noise sigma must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(invalid("outlier fraction must be in [0, 1]"));
        }
        if !self.outlier_magnitude.is_finite() {
            return Err(invalid("outlier magnitude must be finite"));
        }
        Ok(())
    }
}

/// Outcome of corrupting a field, with the outlier footprint for diagnostics.
#[derive(Clone, Debug)]
pub struct CorruptedFlow {
    pub field: CorrespondenceField,
    /// Pixels touched by at least one outlier block.
    pub outliers: Vec<bool>,
}

/// Adds Gaussian-filtered noise of standard deviation `sigma` per axis and
/// randomly placed outlier blocks. Validity is left untouched.
pub fn corrupt_flow(flow: &CorrespondenceField, seed: u64, noise: &FlowNoise) -> Result<CorruptedFlow> {
    noise.validate()?;
    let (w, h) = (flow.width(), flow.height());
    let mut map = flow.map().to_vec();
    let mut outliers = vec![false; w * h];
    if noise.sigma > 0.0 {
        let mut rng = rng_from(seed, &[tag("smooth-noise")]);
        for axis in 0..2 {
            let white: Vec<f64> = (0..w * h).map(|_| normal(&mut rng)).collect();
            let smooth = gaussian_blur(&white, w, h, NOISE_SMOOTHING);
            let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
            let var = smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / smooth.len() as f64;
            let gain = if var > 0.0 { noise.sigma / var.sqrt() } else { 0.0 };
            for (m, v) in map.iter_mut().zip(&smooth) {
                m[axis] += gain * (v - mean);
            }
        }
    }
    if noise.outlier_fraction > 0.0 {
        let mut rng = rng_from(seed, &[tag("outliers")]);
        let area = (OUTLIER_BLOCK * OUTLIER_BLOCK) as f64;
        let blocks = (noise.outlier_fraction * (w * h) as f64 / area).ceil() as usize;
        let bw = OUTLIER_BLOCK.min(w);
        let bh = OUTLIER_BLOCK.min(h);
        for _ in 0..blocks {
            let x0 = rng.gen_range(0..=w - bw);
            let y0 = rng.gen_range(0..=h - bh);
            let angle = rng.gen_range(0.0..TAU);
            let d = [noise.outlier_magnitude * angle.cos(), noise.outlier_magnitude * angle.sin()];
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    let i = y * w + x;
                    if !outliers[i] {
                        map[i][0] += d[0];
                        map[i][1] += d[1];
                        outliers[i] = true;
                    }
                }
            }
        }
    }
    let field = CorrespondenceField::from_parts(w, h, map, flow.valid().to_vec())?;
    Ok(CorruptedFlow { field, outliers })
}

/// Separable Gaussian filter with edge clamping, truncated at 3 sigma.
pub fn gaussian_blur(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                acc += k * data[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let yy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}
