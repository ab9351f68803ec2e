//! Synthetic Y-fork scenes for desk-scale training and tests.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{
    to_ego_frame, Episode, Position, RoadMask, TrackPoint, Trajectory, MASK_RESOLUTION, MASK_SIZE, PAST_LEN,
    PRED_LEN,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Left,
    Right,
}

#[derive(Clone, Debug)]
pub struct ForkConfig {
    /// Half width of every road arm, meters.
    pub half_width: f64,
    pub branch_angle_deg: f64,
    pub max_agents: usize,
    /// Speed range in m/s.
    pub speed: (f64, f64),
    /// Lateral offset range from the centerline, meters.
    pub lateral: f64,
    /// Per-point Gaussian jitter, truncated at three standard deviations.
    pub jitter: f64,
    /// Distance from the ego's present position to the fork.
    pub ego_to_fork: (f64, f64),
    /// Distance from other agents' present positions to the fork.
    pub others_to_fork: (f64, f64),
}

impl Default for ForkConfig {
    fn default() -> Self {
        ForkConfig {
            half_width: 4.0,
            branch_angle_deg: 30.0,
            max_agents: 4,
            speed: (4.0, 6.0),
            lateral: 1.5,
            jitter: 0.05,
            ego_to_fork: (1.0, 8.0),
            others_to_fork: (1.0, 25.0),
        }
    }
}

/// Episodes with the branch each agent took, in agent order.
#[derive(Clone, Debug)]
pub struct ForkDataset {
    pub episodes: Vec<Episode>,
    pub branches: Vec<Vec<Branch>>,
}

fn dist_to_segment_ray(p: Position, origin: Position, dir: (f64, f64), forward: bool) -> f64 {
    let (dx, dy) = (p.x - origin.x, p.y - origin.y);
    let s = dx * dir.0 + dy * dir.1;
    let s = if forward { s.max(0.0) } else { s.min(0.0) };
    (dx - s * dir.0).hypot(dy - s * dir.1)
}

struct Fork {
    apex: Position,
    dirs: [(f64, f64); 2],
    half_width: f64,
}

impl Fork {
    fn new(apex: Position, cfg: &ForkConfig) -> Self {
        let a = cfg.branch_angle_deg.to_radians();
        Fork {
            apex,
            dirs: [(a.cos(), a.sin()), (a.cos(), -a.sin())],
            half_width: cfg.half_width,
        }
    }

    fn drivable(&self, p: Position) -> bool {
        dist_to_segment_ray(p, self.apex, (1.0, 0.0), false) <= self.half_width
            || self.dirs.iter().any(|&d| dist_to_segment_ray(p, self.apex, d, true) <= self.half_width)
    }

    /// Point at signed arc length `s` from the apex, offset `o` to the left of travel.
    fn point(&self, s: f64, o: f64, branch: Branch) -> Position {
        if s <= 0.0 {
            return Position::new(self.apex.x + s, self.apex.y + o);
        }
        let d = self.dirs[match branch {
            Branch::Left => 0,
            Branch::Right => 1,
        }];
        Position::new(self.apex.x + s * d.0 - o * d.1, self.apex.y + s * d.1 + o * d.0)
    }
}

fn truncated(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd <= 0.0 {
        return 0.0;
    }
    let n = Normal::new(0.0, sd).expect("positive standard deviation");
    n.sample(rng).clamp(-3.0 * sd, 3.0 * sd)
}

fn fork_episode(i: usize, rng: &mut ChaCha8Rng, cfg: &ForkConfig) -> Result<(Episode, Vec<Branch>)> {
    let n_agents = rng.random_range(1..=cfg.max_agents.max(1));
    let d_ego = rng.random_range(cfg.ego_to_fork.0..=cfg.ego_to_fork.1);
    let fork = Fork::new(Position::new(d_ego, 0.0), cfg);
    let frames = PAST_LEN + PRED_LEN;
    let present = PAST_LEN as i64 - 1;
    let mut agents = Vec::with_capacity(n_agents);
    let mut branches = Vec::with_capacity(n_agents);
    for id in 0..n_agents {
        let to_fork = if id == 0 {
            d_ego
        } else {
            rng.random_range(cfg.others_to_fork.0..=cfg.others_to_fork.1)
        };
        let speed = rng.random_range(cfg.speed.0..=cfg.speed.1);
        let lateral = if id == 0 { 0.0 } else { rng.random_range(-cfg.lateral..=cfg.lateral) };
        let branch = if rng.random_bool(0.5) { Branch::Left } else { Branch::Right };
        let step = speed * crate::data::FRAME_DT;
        let points = (0..frames as i64)
            .map(|t| {
                let s = -to_fork + (t - present) as f64 * step;
                let mut p = fork.point(s, lateral, branch);
                if !(id == 0 && t == present) {
                    p.x += truncated(rng, cfg.jitter);
                    p.y += truncated(rng, cfg.jitter);
                }
                TrackPoint { t, pos: p, observed: true }
            })
            .collect();
        agents.push(Trajectory { agent_id: id as i64, points });
        branches.push(branch);
    }
    let mask = RoadMask::from_fn(MASK_SIZE, MASK_SIZE, MASK_RESOLUTION, Position::ORIGIN, |r, c| {
        let g = crate::data::GridGeometry {
            height: MASK_SIZE,
            width: MASK_SIZE,
            resolution: MASK_RESOLUTION,
            center: Position::ORIGIN,
        };
        fork.drivable(g.pixel_center(r, c))
    })?;
    let ep = Episode {
        id: format!("fork-{i:05}"),
        agents,
        present_index: present,
        past_len: PAST_LEN,
        pred_len: PRED_LEN,
        road_mask: Arc::new(mask),
        ego_agent_id: 0,
        mask_file: None,
        origin: Position::ORIGIN,
    };
    Ok((to_ego_frame(&ep)?, branches))
}

/// `n` fork episodes with 1 to `max_agents` agents each.
pub fn synth_fork_with(n: usize, seed: u64, cfg: &ForkConfig) -> Result<ForkDataset> {
    if n == 0 {
        return Err(Error::Precondition("synth_fork needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(n);
    let mut branches = Vec::with_capacity(n);
    for i in 0..n {
        let (e, b) = fork_episode(i, &mut rng, cfg)?;
        episodes.push(e);
        branches.push(b);
    }
    Ok(ForkDataset { episodes, branches })
}

pub fn synth_fork(n: usize, seed: u64) -> Result<Vec<Episode>> {
    Ok(synth_fork_with(n, seed, &ForkConfig::default())?.episodes)
}

/// Small episode on an 8x8, 2 m/px map for finite-difference checks.
pub fn micro_episode(seed: u64, agents: usize, horizon: usize) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = RoadMask::from_fn(8, 8, 2.0, Position::ORIGIN, |r, c| (2..6).contains(&r) || c == 5)?;
    let frames = PAST_LEN + horizon;
    let present = PAST_LEN as i64 - 1;
    let trajs = (0..agents)
        .map(|id| {
            let start = if id == 0 {
                Position::ORIGIN
            } else {
                Position::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
            };
            let v = Position::new(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0));
            let points = (0..frames as i64)
                .map(|t| {
                    let k = (t - present) as f64;
                    let wobble = if t == present { 0.0 } else { rng.random_range(-0.2..0.2) };
                    TrackPoint {
                        t,
                        pos: Position::new(start.x + k * v.x + wobble, start.y + k * v.y - wobble),
                        observed: true,
                    }
                })
                .collect();
            Trajectory {
                agent_id: id as i64,
                points,
            }
        })
        .collect();
    Ok(Episode {
        id: format!("micro-{seed}"),
        agents: trajs,
        present_index: present,
        past_len: PAST_LEN,
        pred_len: horizon,
        road_mask: Arc::new(mask),
        ego_agent_id: 0,
        mask_file: None,
        origin: Position::ORIGIN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenemap::rasterize;

    #[test]
    fn ground_truth_stays_on_the_road() {
        let ds = synth_fork(300, 11).unwrap();
        for e in &ds {
            e.validate().unwrap();
            for a in &e.agents {
                let (_, flags) = rasterize(&a.positions(), &e.road_mask);
                assert!(flags.iter().all(|f| !f.off_drivable), "{} agent {}", e.id, a.agent_id);
            }
        }
    }

    #[test]
    fn branch_choice_is_balanced() {
        let ds = synth_fork_with(1000, 3, &ForkConfig::default()).unwrap();
        let ego_left = ds.branches.iter().filter(|b| b[0] == Branch::Left).count() as f64 / 1000.0;
        assert!((ego_left - 0.5).abs() <= 0.05, "{ego_left}");
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        assert_eq!(synth_fork(20, 9).unwrap(), synth_fork(20, 9).unwrap());
        assert_ne!(synth_fork(20, 9).unwrap(), synth_fork(20, 10).unwrap());
    }

    #[test]
    fn agent_counts_span_the_range() {
        let ds = synth_fork(200, 5).unwrap();
        let counts: std::collections::BTreeSet<usize> = ds.iter().map(|e| e.num_agents()).collect();
        assert_eq!(counts.into_iter().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn micro_episode_is_valid() {
        let e = micro_episode(1, 2, 2).unwrap();
        e.validate().unwrap();
        assert_eq!(e.road_mask.height(), 8);
    }
}
