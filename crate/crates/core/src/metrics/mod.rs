//! Precision, diversity and admissibility metrics over sampled hypotheses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::data::{nearest_agents, split_past_pred, Episode, Position, PredictionSet, RoadMask};
use crate::error::{Error, Result};
use crate::scenemap::rasterize;

/// Guard added to minFDE in the rF denominator.
pub const RF_EPS: f64 = 1e-9;
/// DAO is reported as the raw pixel ratio times this factor.
pub const DAO_SCALE: f64 = 10_000.0;
/// Agent counts of the conditioning table.
pub const RI_AGENT_COUNTS: [usize; 4] = [1, 3, 5, 10];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DisplacementErrors {
    pub min_ade: f64,
    pub avg_ade: f64,
    pub min_fde: f64,
    pub avg_fde: f64,
}

/// ADE/FDE of each hypothesis against `gt`, reduced by min and mean.
pub fn displacement_errors(hypotheses: &[Vec<Position>], gt: &[Position]) -> Result<DisplacementErrors> {
    if hypotheses.is_empty() || gt.is_empty() {
        return Err(Error::Precondition("need at least one hypothesis and one ground-truth step".into()));
    }
    let mut out = DisplacementErrors {
        min_ade: f64::INFINITY,
        min_fde: f64::INFINITY,
        ..Default::default()
    };
    for h in hypotheses {
        if h.len() != gt.len() {
            return Err(Error::Precondition(format!(
                "hypothesis has {} steps, ground truth has {}",
                h.len(),
                gt.len()
            )));
        }
        let ade = h.iter().zip(gt).map(|(p, q)| p.dist(q)).sum::<f64>() / gt.len() as f64;
        let fde = h[h.len() - 1].dist(&gt[gt.len() - 1]);
        out.min_ade = out.min_ade.min(ade);
        out.min_fde = out.min_fde.min(fde);
        out.avg_ade += ade;
        out.avg_fde += fde;
    }
    out.avg_ade /= hypotheses.len() as f64;
    out.avg_fde /= hypotheses.len() as f64;
    Ok(out)
}

/// `avgFDE / (minFDE + eps)`.
pub fn rf(avg_fde: f64, min_fde: f64) -> f64 {
    avg_fde / (min_fde + RF_EPS)
}

/// Unique drivable pixels hit by any predicted waypoint over the drivable pixel count.
pub fn dao_raw(preds: &PredictionSet, mask: &RoadMask) -> Result<f64> {
    let drivable = mask.drivable_count();
    if drivable == 0 {
        return Err(Error::Precondition("DAO undefined on a mask without drivable pixels".into()));
    }
    let mut pixels = BTreeSet::new();
    for a in &preds.agents {
        for h in &a.hypotheses {
            pixels.extend(rasterize(h, mask).0);
        }
    }
    let hit = pixels.iter().filter(|&&(r, c)| mask.is_drivable(r, c)).count();
    Ok(hit as f64 / drivable as f64)
}

/// [`dao_raw`] in the reporting convention (times 10,000).
pub fn dao(preds: &PredictionSet, mask: &RoadMask) -> Result<f64> {
    Ok(dao_raw(preds, mask)? * DAO_SCALE)
}

/// Number of hypotheses with at least one waypoint off the drivable area or off the grid.
pub fn offending_hypotheses(hypotheses: &[Vec<Position>], mask: &RoadMask) -> usize {
    hypotheses
        .iter()
        .filter(|h| rasterize(h, mask).1.iter().any(|f| f.off_drivable || f.off_grid))
        .count()
}

/// Fraction of hypotheses that stay on the drivable area, `(k - m) / k`.
pub fn dac(hypotheses: &[Vec<Position>], mask: &RoadMask) -> f64 {
    if hypotheses.is_empty() {
        return 1.0;
    }
    let k = hypotheses.len();
    (k - offending_hypotheses(hypotheses, mask)) as f64 / k as f64
}

/// Number of predicted waypoints on non-drivable or off-grid pixels.
pub fn off_drivable_waypoints(preds: &PredictionSet, mask: &RoadMask) -> usize {
    preds
        .agents
        .iter()
        .flat_map(|a| &a.hypotheses)
        .map(|h| rasterize(h, mask).1.iter().filter(|f| f.off_drivable || f.off_grid).count())
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgentMetrics {
    pub episode_id: String,
    pub agent_id: i64,
    #[serde(flatten)]
    pub errors: DisplacementErrors,
    pub rf: f64,
    pub dac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    pub episode_id: String,
    pub dao: f64,
    pub off_drivable_waypoints: usize,
    pub waypoints: usize,
}

/// Corpus means of the per-agent metrics plus per-episode DAO.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub min_ade: f64,
    pub avg_ade: f64,
    pub min_fde: f64,
    pub avg_fde: f64,
    pub rf: f64,
    pub dao: f64,
    pub dac: f64,
    pub k: usize,
    pub per_agent: Vec<AgentMetrics>,
    pub per_episode: Vec<EpisodeMetrics>,
}

impl MetricsReport {
    /// Fraction of all predicted waypoints that are off the drivable area.
    pub fn off_drivable_fraction(&self) -> f64 {
        let total: usize = self.per_episode.iter().map(|e| e.waypoints).sum();
        let off: usize = self.per_episode.iter().map(|e| e.off_drivable_waypoints).sum();
        if total == 0 {
            0.0
        } else {
            off as f64 / total as f64
        }
    }

    pub fn off_drivable_waypoints(&self) -> usize {
        self.per_episode.iter().map(|e| e.off_drivable_waypoints).sum()
    }

    pub const CSV_HEADER: [&'static str; 8] = ["minADE", "avgADE", "minFDE", "avgFDE", "rF", "DAO", "DAC", "k"];

    pub fn csv_row(&self) -> [String; 8] {
        [
            self.min_ade.to_string(),
            self.avg_ade.to_string(),
            self.min_fde.to_string(),
            self.avg_fde.to_string(),
            self.rf.to_string(),
            self.dao.to_string(),
            self.dac.to_string(),
            self.k.to_string(),
        ]
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        wr.write_record(Self::CSV_HEADER).map_err(fmt)?;
        wr.write_record(self.csv_row()).map_err(fmt)?;
        wr.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_per_agent_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for a in &self.per_agent {
            wr.serialize(a).map_err(|e| Error::Format(e.to_string()))?;
        }
        wr.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>8} {:>8} {:>8} {:>8}  (k={})", "minADE", "minFDE", "rF", "DAO", "DAC", self.k)?;
        write!(
            f,
            "{:>8.3} {:>8.3} {:>8.3} {:>8.2} {:>8.3}",
            self.min_ade, self.min_fde, self.rf, self.dao, self.dac
        )
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores prediction sets against the ground-truth futures of their episodes.
/// Every prediction set must match an episode id and every agent of the set
/// must exist in that episode; every episode must have predictions.
pub fn evaluate(episodes: &[Episode], preds: &[PredictionSet]) -> Result<MetricsReport> {
    let by_id: BTreeMap<&str, &Episode> = episodes.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut covered = BTreeSet::new();
    let mut per_agent = Vec::new();
    let mut per_episode = Vec::new();
    let mut k = None;
    for p in preds {
        p.validate()?;
        let ep = by_id
            .get(p.episode_id.as_str())
            .ok_or_else(|| Error::Precondition(format!("prediction for unknown episode {}", p.episode_id)))?;
        if !covered.insert(p.episode_id.as_str()) {
            return Err(Error::Precondition(format!("duplicate predictions for episode {}", p.episode_id)));
        }
        if *k.get_or_insert(p.k) != p.k {
            return Err(Error::Precondition("prediction sets disagree on k".into()));
        }
        for a in &p.agents {
            let (_, gt) = split_past_pred(ep, a.agent_id)?;
            let errors = displacement_errors(&a.hypotheses, &gt)?;
            per_agent.push(AgentMetrics {
                episode_id: p.episode_id.clone(),
                agent_id: a.agent_id,
                errors,
                rf: rf(errors.avg_fde, errors.min_fde),
                dac: dac(&a.hypotheses, &ep.road_mask),
            });
        }
        per_episode.push(EpisodeMetrics {
            episode_id: p.episode_id.clone(),
            dao: dao(p, &ep.road_mask)?,
            off_drivable_waypoints: off_drivable_waypoints(p, &ep.road_mask),
            waypoints: p.agents.iter().flat_map(|a| &a.hypotheses).map(Vec::len).sum(),
        });
    }
    if let Some(e) = episodes.iter().find(|e| !covered.contains(e.id.as_str())) {
        return Err(Error::Precondition(format!("episode {} has no predictions", e.id)));
    }
    if per_agent.is_empty() {
        return Err(Error::Precondition("nothing to evaluate".into()));
    }
    Ok(MetricsReport {
        min_ade: mean(per_agent.iter().map(|a| a.errors.min_ade)),
        avg_ade: mean(per_agent.iter().map(|a| a.errors.avg_ade)),
        min_fde: mean(per_agent.iter().map(|a| a.errors.min_fde)),
        avg_fde: mean(per_agent.iter().map(|a| a.errors.avg_fde)),
        rf: mean(per_agent.iter().map(|a| a.rf)),
        dao: mean(per_episode.iter().map(|e| e.dao)),
        dac: mean(per_agent.iter().map(|a| a.dac)),
        k: k.unwrap_or(0),
        per_agent,
        per_episode,
    })
}

/// Ego minFDE when the model is conditioned on the nearest 1, 3, 5 and 10 agents.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RITable {
    pub min_fde: [f64; 4],
    pub ri: f64,
}

impl RITable {
    pub fn new(min_fde: [f64; 4]) -> Self {
        RITable {
            min_fde,
            ri: (min_fde[0] - min_fde[3]) / min_fde[0],
        }
    }
}

impl fmt::Display for RITable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in RI_AGENT_COUNTS {
            write!(f, "{:>8}", format!("{n} ag."))?;
        }
        writeln!(f, "{:>8}", "RI")?;
        for v in self.min_fde {
            write!(f, "{v:>8.3}")?;
        }
        write!(f, "{:>8.3}", self.ri)
    }
}

/// Runs `predict` on each episode restricted to its nearest N agents and
/// averages the ego agent's minFDE per N.
pub fn agent_count_table(
    episodes: &[Episode],
    mut predict: impl FnMut(&Episode) -> Result<PredictionSet>,
) -> Result<RITable> {
    if episodes.is_empty() {
        return Err(Error::Precondition("agent-count table needs episodes".into()));
    }
    let mut out = [0.0; 4];
    for (slot, &n) in out.iter_mut().zip(&RI_AGENT_COUNTS) {
        let mut acc = Vec::with_capacity(episodes.len());
        for e in episodes {
            let sub = nearest_agents(e, n)?;
            let p = predict(&sub)?;
            let ego = p
                .agent(sub.ego_agent_id)
                .ok_or_else(|| Error::Precondition(format!("no ego prediction for episode {}", sub.id)))?;
            let (_, gt) = split_past_pred(&sub, sub.ego_agent_id)?;
            acc.push(displacement_errors(&ego.hypotheses, &gt)?.min_fde);
        }
        *slot = mean(acc.into_iter());
    }
    Ok(RITable::new(out))
}
