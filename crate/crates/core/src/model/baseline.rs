use crate::data::{split_past_pred, AgentPrediction, Episode, PredictionSet};
use crate::error::{Error, Result};

/// Single-hypothesis constant-velocity extrapolation of the last past step.
pub fn constant_velocity(episode: &Episode) -> Result<PredictionSet> {
    let agents = episode
        .agents
        .iter()
        .map(|a| {
            let (past, _) = split_past_pred(episode, a.agent_id)?;
            let [.., p1, p0] = past[..] else {
                return Err(Error::Precondition(format!("agent {} needs two past positions", a.agent_id)));
            };
            let v = p0 - p1;
            let hyp = (1..=episode.pred_len)
                .map(|t| p0 + crate::data::Position::new(v.x * t as f64, v.y * t as f64))
                .collect();
            Ok(AgentPrediction {
                agent_id: a.agent_id,
                hypotheses: vec![hyp],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionSet {
        episode_id: episode.id.clone(),
        k: 1,
        agents,
    })
}
