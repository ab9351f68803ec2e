//! On-disk formats: JSON-lines episode and prediction files, binary PGM road masks.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};

use super::types::{
    AgentPrediction, Episode, Position, PredictionSet, RoadMask, TrackPoint, Trajectory,
    MASK_RESOLUTION, MASK_SIZE, PAST_LEN, PRED_LEN,
};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct AgentRecord {
    id: i64,
    /// `[t, x, y, observed]`
    points: Vec<(i64, f64, f64, bool)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeRecord {
    id: String,
    ego_agent_id: i64,
    agents: Vec<AgentRecord>,
    mask_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    present_index: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_center: Option<[f64; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    episode_id: String,
    agent_id: i64,
    k: usize,
    hypotheses: Vec<Vec<[f64; 2]>>,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(f).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads a binary PGM (P5) road mask; only 224x224 masks are accepted.
pub fn load_mask(path: &Path) -> Result<RoadMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    if w as usize != MASK_SIZE || h as usize != MASK_SIZE {
        return Err(Error::Format(format!(
            "{}: mask is {w}x{h}, expected {MASK_SIZE}x{MASK_SIZE}",
            path.display()
        )));
    }
    let data = img.as_raw().iter().map(|&v| v >= 128).collect();
    RoadMask::standard(Position::ORIGIN, data)
}

/// Writes a mask as binary PGM, maxval 255, 255 = drivable.
pub fn save_mask(path: &Path, mask: &RoadMask) -> Result<()> {
    let buf: Vec<u8> = mask
        .drivable()
        .iter()
        .map(|&d| if d { 255 } else { 0 })
        .collect();
    let w = create(path)?;
    PnmEncoder::new(w)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(
            &buf,
            mask.width() as u32,
            mask.height() as u32,
            ExtendedColorType::L8,
        )
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn episode_from_record(
    rec: EpisodeRecord,
    masks: &mut HashMap<String, Arc<RoadMask>>,
    dir: &Path,
) -> Result<Episode> {
    let mask_center = rec
        .mask_center
        .map(|[x, y]| Position::new(x, y))
        .unwrap_or_default();
    let key = format!("{}|{:?}", rec.mask_file, rec.mask_center);
    let mask = match masks.get(&key) {
        Some(m) => m.clone(),
        None => {
            let mut m = load_mask(&dir.join(&rec.mask_file))?;
            m.center = mask_center;
            let m = Arc::new(m);
            masks.insert(key, m.clone());
            m
        }
    };
    let agents: Vec<Trajectory> = rec
        .agents
        .into_iter()
        .map(|a| Trajectory {
            agent_id: a.id,
            points: a
                .points
                .into_iter()
                .map(|(t, x, y, observed)| TrackPoint {
                    t,
                    pos: Position::new(x, y),
                    observed,
                })
                .collect(),
        })
        .collect();
    let present_index = match rec.present_index {
        Some(p) => p,
        None => {
            agents
                .iter()
                .flat_map(|a| a.points.first())
                .map(|p| p.t)
                .min()
                .ok_or_else(|| Error::Invariant("episode without agents".into()))?
                + PAST_LEN as i64
                - 1
        }
    };
    let ep = Episode {
        id: rec.id,
        agents,
        present_index,
        past_len: PAST_LEN,
        pred_len: PRED_LEN,
        road_mask: mask,
        ego_agent_id: rec.ego_agent_id,
        mask_file: Some(rec.mask_file),
        origin: rec.origin.map(|[x, y]| Position::new(x, y)).unwrap_or_default(),
    };
    ep.validate()?;
    Ok(ep)
}

/// Loads a JSON-lines episode file. Mask paths resolve relative to the file.
pub fn load_episodes(path: &Path) -> Result<Vec<Episode>> {
    let dir = base_dir(path);
    let mut masks = HashMap::new();
    let mut out = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let ep = episode_from_record(rec, &mut masks, &dir).map_err(|e| match e {
            Error::Invariant(msg) => Error::Invariant(format!("line {line_no}: {msg}")),
            other => other,
        })?;
        out.push(ep);
    }
    Ok(out)
}

/// Writes episodes and their masks. Episodes without a `mask_file` get `masks/<id>.pgm`.
pub fn save_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let dir = base_dir(path);
    let mut written: HashMap<String, *const RoadMask> = HashMap::new();
    let mut w = create(path)?;
    for ep in episodes {
        if ep.road_mask.height() != MASK_SIZE
            || ep.road_mask.width() != MASK_SIZE
            || ep.road_mask.resolution() != MASK_RESOLUTION
        {
            return Err(Error::Format(format!(
                "episode {}: only {MASK_SIZE}x{MASK_SIZE} masks at {MASK_RESOLUTION} m/px can be saved",
                ep.id
            )));
        }
        let mask_file = ep
            .mask_file
            .clone()
            .unwrap_or_else(|| format!("masks/{}.pgm", ep.id));
        let ptr = Arc::as_ptr(&ep.road_mask);
        if written.get(&mask_file) != Some(&ptr) {
            save_mask(&dir.join(&mask_file), &ep.road_mask)?;
            written.insert(mask_file.clone(), ptr);
        }
        let c = ep.road_mask.center;
        let rec = EpisodeRecord {
            id: ep.id.clone(),
            ego_agent_id: ep.ego_agent_id,
            agents: ep
                .agents
                .iter()
                .map(|a| AgentRecord {
                    id: a.agent_id,
                    points: a
                        .points
                        .iter()
                        .map(|p| (p.t, p.pos.x, p.pos.y, p.observed))
                        .collect(),
                })
                .collect(),
            mask_file,
            present_index: Some(ep.present_index),
            origin: (ep.origin != Position::ORIGIN).then_some([ep.origin.x, ep.origin.y]),
            mask_center: (c != Position::ORIGIN).then_some([c.x, c.y]),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_predictions(path: &Path, sets: &[PredictionSet]) -> Result<()> {
    let mut w = create(path)?;
    for set in sets {
        for a in &set.agents {
            let rec = PredictionRecord {
                episode_id: set.episode_id.clone(),
                agent_id: a.agent_id,
                k: a.k(),
                hypotheses: a
                    .hypotheses
                    .iter()
                    .map(|h| h.iter().map(|p| [p.x, p.y]).collect())
                    .collect(),
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a prediction file, grouping consecutive agent records by episode.
pub fn load_predictions(path: &Path) -> Result<Vec<PredictionSet>> {
    let mut sets: Vec<PredictionSet> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if rec.k != rec.hypotheses.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("k = {} but {} hypotheses", rec.k, rec.hypotheses.len()),
            });
        }
        let agent = AgentPrediction {
            agent_id: rec.agent_id,
            hypotheses: rec
                .hypotheses
                .into_iter()
                .map(|h| h.into_iter().map(|[x, y]| Position::new(x, y)).collect())
                .collect(),
        };
        let i = *index.entry(rec.episode_id.clone()).or_insert_with(|| {
            sets.push(PredictionSet {
                episode_id: rec.episode_id.clone(),
                k: rec.k,
                agents: Vec::new(),
            });
            sets.len() - 1
        });
        sets[i].agents.push(agent);
    }
    for s in &sets {
        s.validate()?;
    }
    Ok(sets)
}
