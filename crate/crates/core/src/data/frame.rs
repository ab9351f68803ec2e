use std::sync::Arc;

use super::types::{Episode, Position, Trajectory};
use crate::error::{Error, Result};

fn translate(episode: &Episode, offset: Position) -> Episode {
    let agents = episode
        .agents
        .iter()
        .map(|a| Trajectory {
            agent_id: a.agent_id,
            points: a
                .points
                .iter()
                .map(|p| {
                    let mut p = *p;
                    p.pos = p.pos - offset;
                    p
                })
                .collect(),
        })
        .collect();
    let mask = (*episode.road_mask).clone();
    let center = mask.center - offset;
    Episode {
        agents,
        road_mask: Arc::new(mask.with_center(center)),
        origin: episode.origin + offset,
        ..episode.clone()
    }
}

/// Translates the episode so the ego agent sits at the origin at the present frame.
pub fn to_ego_frame(episode: &Episode) -> Result<Episode> {
    let ego = episode
        .agent(episode.ego_agent_id)
        .ok_or_else(|| Error::Invariant("ego agent absent".into()))?;
    let present = ego
        .point_at(episode.present_index)
        .filter(|p| p.observed)
        .ok_or_else(|| Error::Precondition("ego agent unobserved at the present frame".into()))?;
    Ok(translate(episode, present.pos))
}

/// Undoes every translation recorded in `episode.origin`.
pub fn from_ego_frame(episode: &Episode) -> Episode {
    let mut out = translate(episode, Position::ORIGIN - episode.origin);
    out.origin = Position::ORIGIN;
    out
}

/// Returns `(past, pred)` positions for one agent: `past_len` frames up to the
/// present and `pred_len` frames after it.
pub fn split_past_pred(episode: &Episode, agent_id: i64) -> Result<(Vec<Position>, Vec<Position>)> {
    let agent = episode
        .agent(agent_id)
        .ok_or(Error::UnknownAgent(agent_id))?;
    let mut past = Vec::with_capacity(episode.past_len);
    let mut pred = Vec::with_capacity(episode.pred_len);
    for t in episode.frames() {
        let p = agent.point_at(t).ok_or_else(|| {
            Error::Precondition(format!("agent {agent_id} missing frame {t}"))
        })?;
        if t <= episode.present_index {
            past.push(p.pos);
        } else {
            pred.push(p.pos);
        }
    }
    Ok((past, pred))
}

/// Keeps the `n` agents closest to the ego at the present frame (ego included).
pub fn nearest_agents(episode: &Episode, n: usize) -> Result<Episode> {
    let ego = episode
        .agent(episode.ego_agent_id)
        .ok_or_else(|| Error::Invariant("ego agent absent".into()))?;
    let ego_pos = ego
        .point_at(episode.present_index)
        .map(|p| p.pos)
        .ok_or_else(|| Error::Precondition("ego missing present frame".into()))?;
    let mut ranked: Vec<(f64, usize)> = episode
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let d = if a.agent_id == episode.ego_agent_id {
                -1.0
            } else {
                a.point_at(episode.present_index)
                    .map(|p| p.pos.dist(&ego_pos))
                    .unwrap_or(f64::INFINITY)
            };
            (d, i)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = ranked.iter().take(n.max(1)).map(|&(_, i)| i).collect();
    keep.sort_unstable();
    Ok(Episode {
        agents: keep.into_iter().map(|i| episode.agents[i].clone()).collect(),
        ..episode.clone()
    })
}
