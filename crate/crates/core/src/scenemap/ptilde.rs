use serde::{Deserialize, Serialize};

use super::edt::DistanceMap;
use crate::data::{GridGeometry, Position};
use crate::error::{Error, Result};

/// Mean and standard deviation used to standardize a map before softmax.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats { mean: 0.0, std: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() || !self.std.is_finite() || self.std <= 0.0 {
            return Err(Error::Precondition(format!(
                "normalization stats must be finite with std > 0, got ({}, {})",
                self.mean, self.std
            )));
        }
        Ok(())
    }

    /// Population mean/std of the inverted distance maps `max(d) - d` over a corpus.
    pub fn from_distance_maps<'a>(maps: impl IntoIterator<Item = &'a DistanceMap>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for m in maps {
            let max = m.max();
            for &d in &m.values {
                let v = max - d;
                n += 1;
                sum += v;
                sum_sq += v * v;
            }
        }
        if n == 0 {
            return Err(Error::Precondition("no distance maps to compute stats".into()));
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        // An all-drivable corpus has zero spread; any positive scale is equivalent then.
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(NormStats { mean, std })
    }
}

/// Approximate future-position distribution over the mask grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PTilde {
    pub geometry: GridGeometry,
    pub prob: Vec<f64>,
    pub log_prob: Vec<f64>,
    pub norm_stats: NormStats,
    min_log_prob: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutOfBounds;

pub fn build_p_tilde(dist: &DistanceMap, geometry: GridGeometry, stats: NormStats) -> Result<PTilde> {
    stats.validate()?;
    if dist.height != geometry.height || dist.width != geometry.width {
        return Err(Error::shape(
            "build_p_tilde",
            format!(
                "distance map {}x{} vs grid {}x{}",
                dist.height, dist.width, geometry.height, geometry.width
            ),
        ));
    }
    let max = dist.max();
    let u: Vec<f64> = dist
        .values
        .iter()
        .map(|&d| ((max - d) - stats.mean) / stats.std)
        .collect();
    let top = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + u.iter().map(|&x| (x - top).exp()).sum::<f64>().ln();
    let log_prob: Vec<f64> = u.iter().map(|&x| x - lse).collect();
    let prob = log_prob.iter().map(|&l| l.exp()).collect();
    let min_log_prob = log_prob.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(PTilde {
        geometry,
        prob,
        log_prob,
        norm_stats: stats,
        min_log_prob,
    })
}

impl PTilde {
    /// Rebuilds a prior from stored log-probabilities.
    pub fn from_log_prob(geometry: GridGeometry, log_prob: Vec<f64>, norm_stats: NormStats) -> Result<Self> {
        if log_prob.len() != geometry.height * geometry.width {
            return Err(Error::shape("PTilde::from_log_prob", "length does not match grid"));
        }
        let prob = log_prob.iter().map(|&l| l.exp()).collect();
        let min_log_prob = log_prob.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(PTilde {
            geometry,
            prob,
            log_prob,
            norm_stats,
            min_log_prob,
        })
    }

    pub fn min_log_prob(&self) -> f64 {
        self.min_log_prob
    }

    /// Bilinear log-probability at a world position with its gradient in meters.
    /// Positions inside the outer half-pixel rim replicate the border.
    pub fn log_p_tilde_at(&self, pos: Position) -> Result<(f64, [f64; 2]), OutOfBounds> {
        let g = &self.geometry;
        let (r, c) = g.to_pixel(pos);
        let (h, w) = (g.height as f64, g.width as f64);
        if !(r >= -0.5 && r <= h - 0.5 && c >= -0.5 && c <= w - 0.5) {
            return Err(OutOfBounds);
        }
        let (v, dr, dc) = bilinear(&self.log_prob, g.height, g.width, r, c);
        Ok((v, [dc / g.resolution, -dr / g.resolution]))
    }

    /// Log-probability with the off-grid penalty: the grid minimum minus the
    /// Euclidean overshoot (in pixels) beyond the grid extent.
    pub fn log_p_tilde_penalized(&self, pos: Position) -> (f64, [f64; 2]) {
        match self.log_p_tilde_at(pos) {
            Ok(v) => v,
            Err(OutOfBounds) => {
                let g = &self.geometry;
                let (r, c) = g.to_pixel(pos);
                let over_r = overshoot(r, g.height as f64);
                let over_c = overshoot(c, g.width as f64);
                let dist = over_r.hypot(over_c);
                if dist == 0.0 {
                    // NaN coordinates land here.
                    return (self.min_log_prob, [0.0, 0.0]);
                }
                // d(dist)/dr = over_r / dist, dr/dy = -1/res, dc/dx = 1/res
                let gx = -(over_c / dist) / g.resolution;
                let gy = (over_r / dist) / g.resolution;
                (self.min_log_prob - dist, [gx, gy])
            }
        }
    }
}

fn overshoot(x: f64, n: f64) -> f64 {
    if x < -0.5 {
        x + 0.5
    } else if x > n - 0.5 {
        x - (n - 0.5)
    } else {
        0.0
    }
}

/// Bilinear interpolation of a row-major scalar grid at fractional `(r, c)`,
/// clamped to the pixel-center hull. Returns the value and its partials.
pub(crate) fn bilinear(values: &[f64], h: usize, w: usize, r: f64, c: f64) -> (f64, f64, f64) {
    let (r, dr_ok) = clamp_axis(r, h);
    let (c, dc_ok) = clamp_axis(c, w);
    let r0 = if h > 1 { (r.floor() as usize).min(h - 2) } else { 0 };
    let c0 = if w > 1 { (c.floor() as usize).min(w - 2) } else { 0 };
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let v00 = values[r0 * w + c0];
    let v01 = values[r0 * w + c1];
    let v10 = values[r1 * w + c0];
    let v11 = values[r1 * w + c1];
    let top = v00 + fc * (v01 - v00);
    let bot = v10 + fc * (v11 - v10);
    let v = top + fr * (bot - top);
    let dr = if dr_ok { bot - top } else { 0.0 };
    let dc = if dc_ok {
        (v01 - v00) + fr * ((v11 - v10) - (v01 - v00))
    } else {
        0.0
    };
    (v, dr, dc)
}

/// Clamps to `[0, n-1]`; the flag is false when clamping was active.
pub(crate) fn clamp_axis(x: f64, n: usize) -> (f64, bool) {
    let hi = (n - 1) as f64;
    if x < 0.0 {
        (0.0, false)
    } else if x > hi {
        (hi, false)
    } else {
        (x, true)
    }
}
