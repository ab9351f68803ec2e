//! Static figure of a prior map with past, ground-truth and sampled trajectories.

use std::path::Path;

use anyhow::{Context, Result};
use image::{imageops, ImageFormat, Rgb, RgbImage};
use trajflow::data::{split_past_pred, GridGeometry};
use trajflow::scenemap::PTilde;
use trajflow::{Episode, Position, PredictionSet};

pub const UPSCALE: u32 = 4;
pub const PAST: Rgb<u8> = Rgb([60, 150, 255]);
pub const TRUTH: Rgb<u8> = Rgb([40, 220, 90]);
pub const HYPOTHESIS: Rgb<u8> = Rgb([255, 70, 60]);

/// Grey level of a prior value: pixels at the maximum render white.
pub fn brightness(prob: f64, max: f64) -> u8 {
    let ratio = prob / max;
    if ratio >= 1.0 - 1e-9 {
        255
    } else {
        ((255.0 * ratio).floor() as i64).clamp(0, 254) as u8
    }
}

fn pixel(geom: &GridGeometry, p: Position) -> (f64, f64) {
    geom.to_pixel(p)
}

fn put(img: &mut RgbImage, r: f64, c: f64, color: Rgb<u8>) {
    let (r, c) = (r.round(), c.round());
    if r >= 0.0 && c >= 0.0 && (r as u32) < img.height() && (c as u32) < img.width() {
        img.put_pixel(c as u32, r as u32, color);
    }
}

fn polyline(img: &mut RgbImage, geom: &GridGeometry, pts: &[Position], color: Rgb<u8>) {
    for w in pts.windows(2) {
        let (r0, c0) = pixel(geom, w[0]);
        let (r1, c1) = pixel(geom, w[1]);
        let n = (r1 - r0).abs().max((c1 - c0).abs()).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            put(img, r0 + t * (r1 - r0), c0 + t * (c1 - c0), color);
        }
    }
    if let [p] = pts {
        let (r, c) = pixel(geom, *p);
        put(img, r, c, color);
    }
}

/// Renders at grid resolution; `upscale` it before saving.
pub fn render(episode: &Episode, prior: &PTilde, preds: Option<&PredictionSet>) -> Result<RgbImage> {
    let geom = prior.geometry;
    let max = prior.prob.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut img = RgbImage::from_fn(geom.width as u32, geom.height as u32, |c, r| {
        let v = brightness(prior.prob[r as usize * geom.width + c as usize], max);
        Rgb([v, v, v])
    });
    if let Some(set) = preds {
        for a in &set.agents {
            for h in &a.hypotheses {
                let mut line = Vec::with_capacity(h.len() + 1);
                if let Ok((past, _)) = split_past_pred(episode, a.agent_id) {
                    line.extend(past.last().copied());
                }
                line.extend_from_slice(h);
                polyline(&mut img, &geom, &line, HYPOTHESIS);
            }
        }
    }
    for a in &episode.agents {
        let (past, future) = split_past_pred(episode, a.agent_id)?;
        let mut gt = Vec::with_capacity(future.len() + 1);
        gt.extend(past.last().copied());
        gt.extend_from_slice(&future);
        polyline(&mut img, &geom, &gt, TRUTH);
        polyline(&mut img, &geom, &past, PAST);
    }
    Ok(img)
}

pub fn upscale(img: &RgbImage) -> RgbImage {
    imageops::resize(
        img,
        img.width() * UPSCALE,
        img.height() * UPSCALE,
        imageops::FilterType::Nearest,
    )
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))
}
