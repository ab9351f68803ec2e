use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use trajflow::data::{load_episodes, load_mask, load_predictions, save_episodes, save_predictions};
use trajflow::metrics;
use trajflow::model::{DatasetStats, Model};
use trajflow::objective::{self, ForkConfig, TrainConfig};
use trajflow::preprocess::{self, SnippetConfig, WorldMap, DEFAULT_EM_ITERS};
use trajflow::scenemap::{build_p_tilde, distance_transform, grid_io, NormStats};

use crate::manifest::{beside, Manifest};
use crate::plot;
use crate::settings::Settings;

pub fn preprocess(s: &Settings) -> Result<()> {
    s.check_keys(&["input", "mask", "out", "em_iters", "stride", "max_per_scene"])?;
    let input = s.path("input")?;
    let out = s.path("out")?;
    let defaults = SnippetConfig::default();
    let cfg = SnippetConfig {
        stride: s.parse_or("stride", defaults.stride)?,
        max_per_scene: s.parse_or("max_per_scene", defaults.max_per_scene)?,
        ..defaults
    };
    if cfg.stride == 0 {
        bail!("stride must be at least 1");
    }
    let iters = s.parse_or("em_iters", DEFAULT_EM_ITERS)?;
    let world = WorldMap::from_mask(&load_mask(&s.path("mask")?)?);
    let scenes = preprocess::load_raw_tracks(&input)?;
    let (episodes, report) = preprocess::preprocess_scenes(&scenes, &world, iters, &cfg)?;
    save_episodes(&out, &episodes)?;
    println!(
        "{} scenes, {} tracks smoothed, {} dropped, {} episodes, {} windows skipped",
        report.scenes,
        report.tracks_smoothed,
        report.tracks_dropped,
        episodes.len(),
        report.windows_skipped.total()
    );
    Manifest::new("preprocess", s, &[&out]).write(&beside(&out))
}

fn with_extension(p: &Path, ext: &str) -> PathBuf {
    p.with_extension(ext)
}

pub fn make_maps(s: &Settings) -> Result<()> {
    s.check_keys(&["episodes"])?;
    let path = s.path("episodes")?;
    let episodes = load_episodes(&path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut masks = BTreeMap::new();
    for e in &episodes {
        let file = e
            .mask_file
            .clone()
            .ok_or_else(|| anyhow!("episode {} has no mask file", e.id))?;
        masks.entry(file).or_insert_with(|| e.road_mask.clone());
    }
    let mut maps = Vec::with_capacity(masks.len());
    for mask in masks.values() {
        maps.push(distance_transform(mask)?);
    }
    let stats = NormStats::from_distance_maps(&maps)?;
    let mut outputs = Vec::new();
    for ((file, mask), dist) in masks.iter().zip(&maps) {
        let base = dir.join(file);
        let prior = build_p_tilde(dist, mask.geometry(), stats)?;
        let (d, p) = (with_extension(&base, "dist"), with_extension(&base, "ptilde"));
        grid_io::write_f32_grid(&d, dist.height, dist.width, &dist.values)?;
        grid_io::write_f32_grid(&p, dist.height, dist.width, &prior.prob)?;
        outputs.push(d);
        outputs.push(p);
    }
    let stats_path = with_extension(&path, "prior_stats.json");
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats)? + "\n")
        .with_context(|| format!("writing {}", stats_path.display()))?;
    println!(
        "{} masks, prior normalization mean {:.4} std {:.4}",
        masks.len(),
        stats.mean,
        stats.std
    );
    let mut listed: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    listed.push(&stats_path);
    Manifest::new("make-maps", s, &listed).write(&beside(&stats_path))
}

pub fn synth(s: &Settings) -> Result<()> {
    s.check_keys(&["n", "seed", "out", "max_agents", "jitter", "branch_angle_deg"])?;
    let seed = s.seed()?;
    let out = s.path("out")?;
    let n: usize = s.parse_or("n", 500)?;
    let d = ForkConfig::default();
    let cfg = ForkConfig {
        max_agents: s.parse_or("max_agents", d.max_agents)?,
        jitter: s.parse_or("jitter", d.jitter)?,
        branch_angle_deg: s.parse_or("branch_angle_deg", d.branch_angle_deg)?,
        ..d
    };
    let ds = objective::synth_fork_with(n, seed, &cfg)?;
    save_episodes(&out, &ds.episodes)?;
    println!("{} episodes written to {}", ds.episodes.len(), out.display());
    Manifest::new("synth", s, &[&out]).write(&beside(&out))
}

pub fn train(s: &Settings) -> Result<()> {
    let mut cfg = TrainConfig::default();
    for (k, v) in s.entries() {
        cfg.apply(k, v)?;
    }
    cfg.seed = s.seed()?;
    cfg.validate()?;
    let train_path = cfg.train_path.clone().ok_or_else(|| anyhow!("missing required setting \"train\""))?;
    let val_path = cfg.val_path.clone().ok_or_else(|| anyhow!("missing required setting \"val\""))?;
    let out = cfg.out_dir.clone().ok_or_else(|| anyhow!("missing required setting \"out\""))?;
    let train_eps = load_episodes(&train_path)?;
    let val_eps = load_episodes(&val_path)?;
    let outcome = objective::train(&train_eps, &val_eps, &cfg)?;
    let best = outcome.log.get(outcome.best_epoch);
    println!(
        "{} epochs, {} steps, best epoch {}{}",
        outcome.log.len(),
        outcome.steps,
        outcome.best_epoch,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    if let Some(b) = best {
        println!(
            "best validation avgADE {:.3} avgFDE {:.3} minFDE {:.3} DAC {:.3}",
            b.val_avg_ade, b.val_avg_fde, b.val_min_fde, b.val_dac
        );
    }
    let outputs = [
        out.join(objective::BEST_CHECKPOINT),
        out.join(objective::LAST_CHECKPOINT),
        out.join(objective::TRAIN_LOG),
    ];
    let listed: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    Manifest::new("train", s, &listed).write(&out.join("manifest.json"))
}

pub fn sample(s: &Settings) -> Result<()> {
    s.check_keys(&["checkpoint", "episodes", "k", "seed", "out"])?;
    let seed = s.seed()?;
    let k: usize = s.parse_or("k", 12)?;
    let out = s.path("out")?;
    let model = Model::load(&s.path("checkpoint")?)?;
    let episodes = load_episodes(&s.path("episodes")?)?;
    let prepared = objective::prepare_all(&model, &episodes)?;
    let preds = objective::sample_all(&model, &prepared, k, seed)?;
    save_predictions(&out, &preds)?;
    println!("{} episodes, k={k}, written to {}", preds.len(), out.display());
    Manifest::new("sample", s, &[&out]).write(&beside(&out))
}

pub fn evaluate(s: &Settings) -> Result<()> {
    s.check_keys(&["episodes", "predictions", "out", "per_agent"])?;
    let episodes = load_episodes(&s.path("episodes")?)?;
    let preds = load_predictions(&s.path("predictions")?)?;
    let report = metrics::evaluate(&episodes, &preds)?;
    println!("{report}");
    let mut outputs = Vec::new();
    if let Some(out) = s.opt_path("out") {
        let f = std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
        report.write_csv(f)?;
        outputs.push(out);
    }
    if let Some(out) = s.opt_path("per_agent") {
        let f = std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
        report.write_per_agent_csv(f)?;
        outputs.push(out);
    }
    if let Some(first) = outputs.first() {
        let listed: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
        Manifest::new("evaluate", s, &listed).write(&beside(first))?;
    }
    Ok(())
}

pub fn plot_cmd(s: &Settings) -> Result<()> {
    s.check_keys(&["episodes", "episode", "predictions", "checkpoint", "out"])?;
    let out = s.path("out")?;
    let episodes = load_episodes(&s.path("episodes")?)?;
    let episode = match s.get("episode") {
        Some(id) => episodes
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| anyhow!("no episode {id:?}"))?,
        None => episodes.first().ok_or_else(|| anyhow!("episode file is empty"))?,
    };
    let stats = match s.opt_path("checkpoint") {
        Some(ckpt) => Model::load(&ckpt)?.stats.prior,
        None => DatasetStats::from_episodes(&episodes)?.prior,
    };
    let preds = match s.opt_path("predictions") {
        Some(p) => load_predictions(&p)?.into_iter().find(|set| set.episode_id == episode.id),
        None => None,
    };
    let mask = Arc::clone(&episode.road_mask);
    let prior = build_p_tilde(&distance_transform(&mask)?, mask.geometry(), stats)?;
    let img = plot::upscale(&plot::render(episode, &prior, preds.as_ref())?);
    plot::save_png(&img, &out)?;
    println!("{} ({}x{}) written to {}", episode.id, img.width(), img.height(), out.display());
    Manifest::new("plot", s, &[&out]).write(&beside(&out))
}
