use serde::{Deserialize, Serialize};

use super::edt::DistanceMap;
use super::ptilde::NormStats;
use crate::error::Result;

pub const CONTEXT_CHANNELS: usize = 3;

/// Per-channel standardization for the scene context.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneStats {
    pub channels: [NormStats; CONTEXT_CHANNELS],
}

/// Channels-last `H x W x 3` scene context.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneContext {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SceneContext {
    pub fn at(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.width + c) * CONTEXT_CHANNELS + ch]
    }
}

/// Raw (unstandardized) channel values for pixel `i` of an `h x w` grid.
fn raw_channels(dist: &DistanceMap, i: usize) -> [f64; CONTEXT_CHANNELS] {
    let (h, w) = (dist.height, dist.width);
    let (r, c) = ((i / w) as f64, (i % w) as f64);
    let cr = (h as f64 - 1.0) / 2.0;
    let cc = (w as f64 - 1.0) / 2.0;
    let index = if h * w > 1 { i as f64 / (h * w - 1) as f64 } else { 0.0 };
    [dist.values[i], index, (r - cr).hypot(c - cc)]
}

impl SceneStats {
    pub fn from_distance_maps<'a>(maps: impl IntoIterator<Item = &'a DistanceMap>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; CONTEXT_CHANNELS];
        let mut sum_sq = [0.0; CONTEXT_CHANNELS];
        for m in maps {
            for i in 0..m.values.len() {
                let v = raw_channels(m, i);
                for ch in 0..CONTEXT_CHANNELS {
                    sum[ch] += v[ch];
                    sum_sq[ch] += v[ch] * v[ch];
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(crate::Error::Precondition("no distance maps to compute stats".into()));
        }
        let channels = std::array::from_fn(|ch| {
            let mean = sum[ch] / n as f64;
            let var = (sum_sq[ch] / n as f64 - mean * mean).max(0.0);
            NormStats {
                mean,
                std: if var > 0.0 { var.sqrt() } else { 1.0 },
            }
        });
        Ok(SceneStats { channels })
    }
}

/// Distance channel, row-major pixel index scaled to [0, 1], and distance to the
/// grid center, each standardized by `stats`.
pub fn build_scene_context(dist: &DistanceMap, stats: &SceneStats) -> Result<SceneContext> {
    for s in &stats.channels {
        s.validate()?;
    }
    let n = dist.height * dist.width;
    let mut data = Vec::with_capacity(n * CONTEXT_CHANNELS);
    for i in 0..n {
        let v = raw_channels(dist, i);
        for ch in 0..CONTEXT_CHANNELS {
            let s = stats.channels[ch];
            data.push((v[ch] - s.mean) / s.std);
        }
    }
    Ok(SceneContext {
        height: dist.height,
        width: dist.width,
        data,
    })
}

/// Adaptive average pooling to `size x size`; bin `i` covers
/// `[floor(i*H/size), ceil((i+1)*H/size))`.
pub fn pool_context(ctx: &SceneContext, size: usize) -> SceneContext {
    let bins = |n: usize, i: usize| (i * n / size, ((i + 1) * n).div_ceil(size));
    let mut data = Vec::with_capacity(size * size * CONTEXT_CHANNELS);
    for i in 0..size {
        let (r0, r1) = bins(ctx.height, i);
        for j in 0..size {
            let (c0, c1) = bins(ctx.width, j);
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            let mut acc = [0.0; CONTEXT_CHANNELS];
            for r in r0..r1 {
                for c in c0..c1 {
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += ctx.at(r, c, ch);
                    }
                }
            }
            data.extend(acc.iter().map(|a| a / count));
        }
    }
    SceneContext {
        height: size,
        width: size,
        data,
    }
}
