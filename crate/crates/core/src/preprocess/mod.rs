//! Raw track conditioning: EM-fitted constant-velocity Kalman smoothing and
//! slicing of smoothed scenes into fixed-length episodes.

mod kalman;
mod snippets;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

pub use kalman::{
    clip_covariance, em_fit, em_fit_from, emission_matrix, filter_smooth, m_step, smooth_impute, smooth_track,
    transition_matrix, EmFit, KalmanModel, RawObservation, RawTrack, SmootherOutput, COVARIANCE_FLOOR,
    DEFAULT_EM_ITERS,
};
pub use snippets::{
    extract_snippets, window_starts, FixedMask, MaskSource, SkipReport, SnippetConfig, WorldMap, DEFAULT_STRIDE,
    MAX_SNIPPETS_PER_SCENE,
};

use crate::data::{Episode, Trajectory};
use crate::error::{Error, Result};

/// All raw tracks of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct RawScene {
    pub id: String,
    pub ego_agent_id: i64,
    pub tracks: Vec<RawTrack>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    #[serde(default = "default_scene")]
    scene: String,
    agent_id: i64,
    #[serde(default)]
    ego: bool,
    points: Vec<(i64, Option<f64>, Option<f64>, Option<f64>, bool)>,
}

fn default_scene() -> String {
    "scene".into()
}

/// Reads raw tracks, one agent per line:
/// `{"scene": "s", "agent_id": 3, "ego": true, "points": [[t, x, y, z, observed], ...]}`.
/// Scenes without an `ego` flag use their lowest agent id.
pub fn load_raw_tracks(path: &Path) -> Result<Vec<RawScene>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut scenes: BTreeMap<String, (Option<i64>, Vec<RawTrack>)> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let observations = rec
            .points
            .iter()
            .map(|&(t, x, y, z, observed)| match (x, y, observed) {
                (Some(x), Some(y), true) => Ok(RawObservation { t, x, y, z: z.unwrap_or(0.0), observed }),
                (_, _, false) => Ok(RawObservation { t, x: 0.0, y: 0.0, z: 0.0, observed }),
                _ => Err(Error::Parse {
                    line: i + 1,
                    msg: format!("observed point at t={t} lacks coordinates"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        let track = RawTrack {
            agent_id: rec.agent_id,
            observations,
        };
        track.validate().map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let entry = scenes.entry(rec.scene).or_default();
        if rec.ego {
            entry.0 = Some(rec.agent_id);
        }
        entry.1.push(track);
    }
    Ok(scenes
        .into_iter()
        .map(|(id, (ego, tracks))| RawScene {
            ego_agent_id: ego.unwrap_or_else(|| tracks.iter().map(|t| t.agent_id).min().unwrap_or(0)),
            id,
            tracks,
        })
        .collect())
}

#[derive(Clone, Debug, Default)]
pub struct PreprocessReport {
    pub scenes: usize,
    pub tracks_smoothed: usize,
    /// Tracks with fewer than two observations.
    pub tracks_dropped: usize,
    pub windows_skipped: SkipReport,
}

/// Smooths every track and slices each scene into episodes.
pub fn preprocess_scenes(
    scenes: &[RawScene],
    masks: &dyn MaskSource,
    em_iters: usize,
    cfg: &SnippetConfig,
) -> Result<(Vec<Episode>, PreprocessReport)> {
    let mut report = PreprocessReport {
        scenes: scenes.len(),
        ..Default::default()
    };
    let mut episodes = Vec::new();
    for scene in scenes {
        let mut smoothed: Vec<Trajectory> = Vec::new();
        for track in &scene.tracks {
            match smooth_track(track, em_iters) {
                Ok(t) => {
                    smoothed.push(t);
                    report.tracks_smoothed += 1;
                }
                Err(Error::Precondition(msg)) => {
                    log::warn!("scene {}: dropping track {}: {msg}", scene.id, track.agent_id);
                    report.tracks_dropped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        let (eps, skipped) = extract_snippets(&scene.id, &smoothed, scene.ego_agent_id, masks, cfg)?;
        report.windows_skipped.absorb(&skipped);
        episodes.extend(eps);
    }
    Ok((episodes, report))
}
