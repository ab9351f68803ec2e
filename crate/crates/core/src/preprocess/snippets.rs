use std::sync::Arc;

use crate::data::{
    to_ego_frame, Episode, GridGeometry, Position, RoadMask, Trajectory, MASK_RESOLUTION, MASK_SIZE,
    PAST_LEN, PRED_LEN,
};
use crate::error::{Error, Result};

pub const DEFAULT_STRIDE: usize = 1;
pub const MAX_SNIPPETS_PER_SCENE: usize = 30;

/// Supplies the road mask for a window, given the ego's world position at the present frame.
pub trait MaskSource {
    fn mask_at(&self, present_frame: i64, ego: Position) -> Result<Arc<RoadMask>>;
}

/// The same mask for every window.
pub struct FixedMask(pub Arc<RoadMask>);

impl MaskSource for FixedMask {
    fn mask_at(&self, _: i64, _: Position) -> Result<Arc<RoadMask>> {
        Ok(self.0.clone())
    }
}

/// A large world raster from which standard masks are cropped around the ego.
pub struct WorldMap {
    pub geometry: GridGeometry,
    pub drivable: Vec<bool>,
}

impl WorldMap {
    pub fn new(geometry: GridGeometry, drivable: Vec<bool>) -> Result<Self> {
        if drivable.len() != geometry.height * geometry.width {
            return Err(Error::Format("world map size does not match its geometry".into()));
        }
        Ok(WorldMap { geometry, drivable })
    }

    pub fn from_mask(mask: &RoadMask) -> Self {
        WorldMap {
            geometry: mask.geometry(),
            drivable: mask.drivable().to_vec(),
        }
    }

    /// Nearest-neighbour crop of a standard mask centered on `center`;
    /// pixels outside the world map are non-drivable.
    pub fn crop(&self, center: Position) -> Result<RoadMask> {
        let target = GridGeometry {
            height: MASK_SIZE,
            width: MASK_SIZE,
            resolution: MASK_RESOLUTION,
            center,
        };
        RoadMask::from_fn(MASK_SIZE, MASK_SIZE, MASK_RESOLUTION, center, |r, c| {
            self.geometry
                .nearest_pixel(target.pixel_center(r, c))
                .is_some_and(|(wr, wc)| self.drivable[wr * self.geometry.width + wc])
        })
    }
}

impl MaskSource for WorldMap {
    fn mask_at(&self, _: i64, ego: Position) -> Result<Arc<RoadMask>> {
        Ok(Arc::new(self.crop(ego)?))
    }
}

#[derive(Clone, Debug)]
pub struct SnippetConfig {
    pub past_len: usize,
    pub pred_len: usize,
    pub stride: usize,
    pub max_per_scene: usize,
}

impl Default for SnippetConfig {
    fn default() -> Self {
        SnippetConfig {
            past_len: PAST_LEN,
            pred_len: PRED_LEN,
            stride: DEFAULT_STRIDE,
            max_per_scene: MAX_SNIPPETS_PER_SCENE,
        }
    }
}

impl SnippetConfig {
    pub fn window_len(&self) -> usize {
        self.past_len + self.pred_len
    }
}

/// Start frames of every full window in `first..=last`.
pub fn window_starts(first: i64, last: i64, window: usize, stride: usize) -> Vec<i64> {
    let stride = stride.max(1) as i64;
    let last_start = last - window as i64 + 1;
    if last_start < first {
        return Vec::new();
    }
    (first..=last_start).step_by(stride as usize).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SkipReport {
    /// Windows without any agent spanning all frames.
    pub no_agents: usize,
    /// Windows where the ego did not span all frames.
    pub no_ego: usize,
    /// Windows whose mask crop had no drivable pixel.
    pub no_road: usize,
    /// Windows dropped by the per-scene cap.
    pub capped: usize,
}

impl SkipReport {
    pub fn total(&self) -> usize {
        self.no_agents + self.no_ego + self.no_road + self.capped
    }

    pub fn absorb(&mut self, other: &SkipReport) {
        self.no_agents += other.no_agents;
        self.no_ego += other.no_ego;
        self.no_road += other.no_road;
        self.capped += other.capped;
    }
}

/// Slices one scene of smoothed, dense tracks into ego-centred episodes.
/// Agents missing any frame of a window are dropped from that window.
pub fn extract_snippets(
    scene_id: &str,
    tracks: &[Trajectory],
    ego_agent_id: i64,
    masks: &dyn MaskSource,
    cfg: &SnippetConfig,
) -> Result<(Vec<Episode>, SkipReport)> {
    let mut report = SkipReport::default();
    let first = tracks.iter().filter_map(|t| t.points.first()).map(|p| p.t).min();
    let last = tracks.iter().filter_map(|t| t.points.last()).map(|p| p.t).max();
    let (Some(first), Some(last)) = (first, last) else {
        return Ok((Vec::new(), report));
    };
    let mut episodes = Vec::new();
    for start in window_starts(first, last, cfg.window_len(), cfg.stride) {
        let end = start + cfg.window_len() as i64 - 1;
        let agents: Vec<Trajectory> = tracks
            .iter()
            .filter_map(|t| {
                let pts: Vec<_> = t.points.iter().filter(|p| p.t >= start && p.t <= end).copied().collect();
                (pts.len() == cfg.window_len()).then(|| Trajectory {
                    agent_id: t.agent_id,
                    points: pts,
                })
            })
            .collect();
        if agents.is_empty() {
            report.no_agents += 1;
            continue;
        }
        let present = start + cfg.past_len as i64 - 1;
        let Some(ego_pos) = agents
            .iter()
            .find(|a| a.agent_id == ego_agent_id)
            .and_then(|a| a.point_at(present))
            .map(|p| p.pos)
        else {
            report.no_ego += 1;
            continue;
        };
        if episodes.len() >= cfg.max_per_scene {
            report.capped += 1;
            continue;
        }
        let mask = match masks.mask_at(present, ego_pos) {
            Ok(m) => m,
            Err(Error::Invariant(_)) => {
                report.no_road += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let ep = Episode {
            id: format!("{scene_id}-{present:04}"),
            agents,
            present_index: present,
            past_len: cfg.past_len,
            pred_len: cfg.pred_len,
            road_mask: mask,
            ego_agent_id,
            mask_file: None,
            origin: Position::ORIGIN,
        };
        episodes.push(to_ego_frame(&ep)?);
    }
    Ok((episodes, report))
}
