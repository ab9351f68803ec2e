use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{split_past_pred, to_ego_frame, Episode, Position, RoadMask};
use crate::diffnet::Tensor;
use crate::error::{Error, Result};
use crate::scenemap::{
    build_p_tilde, build_scene_context, distance_transform, pool_context, DistanceMap, NormStats, PTilde,
    SceneStats, CONTEXT_CHANNELS,
};

/// Training-corpus normalization constants for the scene context and the prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub scene: SceneStats,
    pub prior: NormStats,
}

impl DatasetStats {
    pub fn from_distance_maps(maps: &[DistanceMap]) -> Result<Self> {
        Ok(DatasetStats {
            scene: SceneStats::from_distance_maps(maps)?,
            prior: NormStats::from_distance_maps(maps)?,
        })
    }

    /// Statistics over the distinct masks of a corpus.
    pub fn from_episodes(episodes: &[Episode]) -> Result<Self> {
        let mut seen: Vec<&Arc<RoadMask>> = Vec::new();
        let mut maps = Vec::new();
        for e in episodes {
            if seen.iter().any(|m| Arc::ptr_eq(m, &e.road_mask)) {
                continue;
            }
            seen.push(&e.road_mask);
            maps.push(distance_transform(&e.road_mask)?);
        }
        Self::from_distance_maps(&maps)
    }
}

/// An episode in the model's ego frame with its scene inputs precomputed.
#[derive(Clone, Debug)]
pub struct PreparedEpisode {
    pub episode_id: String,
    pub agent_ids: Vec<i64>,
    /// Per agent, `past_len` positions ending at the present.
    pub past: Vec<Vec<Position>>,
    /// Per agent, `pred_len` ground-truth positions.
    pub future: Vec<Vec<Position>>,
    /// Pooled scene context `[s, s, 3]`.
    pub context: Tensor,
    pub prior: Arc<PTilde>,
    pub mask: Arc<RoadMask>,
    /// World position of the model frame's origin.
    pub offset: Position,
}

impl PreparedEpisode {
    pub fn num_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn horizon(&self) -> usize {
        self.future.first().map_or(0, Vec::len)
    }
}

/// Moves the episode into the ego frame and builds the pooled context and prior.
pub fn prepare_episode(episode: &Episode, stats: &DatasetStats, ctx_size: usize) -> Result<PreparedEpisode> {
    if episode.agents.is_empty() {
        return Err(Error::Precondition(format!("episode {} has no agents", episode.id)));
    }
    let local = to_ego_frame(episode)?;
    let offset = local.origin - episode.origin;
    let mut past = Vec::with_capacity(local.agents.len());
    let mut future = Vec::with_capacity(local.agents.len());
    for a in &local.agents {
        let (p, f) = split_past_pred(&local, a.agent_id)?;
        if p.len() != local.past_len {
            return Err(Error::Precondition(format!(
                "agent {} has {} past frames, expected {}",
                a.agent_id,
                p.len(),
                local.past_len
            )));
        }
        past.push(p);
        future.push(f);
    }
    let mask = local.road_mask.clone();
    let dist = distance_transform(&mask)?;
    let ctx = pool_context(&build_scene_context(&dist, &stats.scene)?, ctx_size);
    let prior = build_p_tilde(&dist, mask.geometry(), stats.prior)?;
    Ok(PreparedEpisode {
        episode_id: episode.id.clone(),
        agent_ids: local.agents.iter().map(|a| a.agent_id).collect(),
        past,
        future,
        context: Tensor::new(vec![ctx_size, ctx_size, CONTEXT_CHANNELS], ctx.data)?,
        prior: Arc::new(prior),
        mask,
        offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{TrackPoint, Trajectory};

    fn episode(shift: Position) -> Episode {
        let mask = RoadMask::from_fn(224, 224, 0.5, shift, |r, _| (100..124).contains(&r)).unwrap();
        let agents = (0..2)
            .map(|id| Trajectory {
                agent_id: id,
                points: (0..10)
                    .map(|t| TrackPoint {
                        t,
                        pos: shift + Position::new(t as f64 - 3.0, id as f64),
                        observed: true,
                    })
                    .collect(),
            })
            .collect();
        Episode {
            id: "e".into(),
            agents,
            present_index: 3,
            past_len: 4,
            pred_len: 6,
            road_mask: Arc::new(mask),
            ego_agent_id: 0,
            mask_file: None,
            origin: Position::ORIGIN,
        }
    }

    #[test]
    fn preparation_is_translation_invariant() {
        let e0 = episode(Position::ORIGIN);
        let e1 = episode(Position::new(40.0, -12.5));
        let stats = DatasetStats::from_episodes(&[e0.clone()]).unwrap();
        let p0 = prepare_episode(&e0, &stats, 32).unwrap();
        let p1 = prepare_episode(&e1, &stats, 32).unwrap();
        assert_eq!(p1.offset, Position::new(40.0, -12.5));
        assert_eq!(p0.past, p1.past);
        assert_eq!(p0.future, p1.future);
        assert_eq!(p0.context, p1.context);
        assert_eq!(p0.past[0][3], Position::ORIGIN);
        assert_eq!(p0.context.shape, vec![32, 32, 3]);
        assert_eq!(p0.horizon(), 6);
    }

    #[test]
    fn stats_deduplicate_shared_masks() {
        let e = episode(Position::ORIGIN);
        let a = DatasetStats::from_episodes(&[e.clone()]).unwrap();
        let b = DatasetStats::from_episodes(&[e.clone(), e]).unwrap();
        assert_eq!(a, b);
    }
}
