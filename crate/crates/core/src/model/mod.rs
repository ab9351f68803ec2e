//! The forecaster: past-trajectory encoder with cross-agent attention, a
//! convolutional scene backbone, and an autoregressive affine flow decoder
//! with agent-to-scene attention and a local scene extractor.

mod baseline;
mod config;
mod input;
mod network;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use baseline::constant_velocity;
pub use config::ModelConfig;
pub use input::{prepare_episode, DatasetStats, PreparedEpisode};
pub use network::{Drive, Encoded, StepVars, LOG_2PI};

use crate::data::{AgentPrediction, Position, PredictionSet};
use crate::diffnet::{expm2x2, Graph, Mode, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use network::{step_log_q, Network};

/// One flow step of one row, read back from the graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowStep {
    pub mu_hat: [f64; 2],
    /// Row-major.
    pub sigma_hat: [f64; 4],
    pub mu: [f64; 2],
    pub sigma: [f64; 4],
    pub z: [f64; 2],
    pub log_q: f64,
}

/// Positions and flow steps of every decoded row, `[rows][horizon]`.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub positions: Vec<Vec<Position>>,
    pub steps: Vec<Vec<FlowStep>>,
}

/// Affine flow map `sigma z + mu` with `sigma = expm(sigma_hat)`.
pub fn flow_forward(sigma_hat: [f64; 4], mu: [f64; 2], z: [f64; 2]) -> [f64; 2] {
    let s = expm2x2(sigma_hat);
    [s[0] * z[0] + s[1] * z[1] + mu[0], s[2] * z[0] + s[3] * z[1] + mu[1]]
}

/// Inverse flow map `expm(-sigma_hat) (x - mu)`.
pub fn flow_inverse(sigma_hat: [f64; 4], mu: [f64; 2], x: [f64; 2]) -> [f64; 2] {
    let s = expm2x2(sigma_hat.map(|v| -v));
    let (dx, dy) = (x[0] - mu[0], x[1] - mu[1]);
    [s[0] * dx + s[1] * dy, s[2] * dx + s[3] * dy]
}

/// Degraded Verlet mean `prev + alpha (prev - prev2) + mu_hat`.
pub fn constrained_mean(prev: Position, prev2: Position, mu_hat: [f64; 2], alpha: f64) -> Position {
    Position::new(
        prev.x + alpha * (prev.x - prev2.x) + mu_hat[0],
        prev.y + alpha * (prev.y - prev2.y) + mu_hat[1],
    )
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: ModelConfig,
    stats: DatasetStats,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub stats: DatasetStats,
    pub params: ParamStore,
    net: Network,
}

fn row2(t: &Tensor, r: usize) -> [f64; 2] {
    [t.data[2 * r], t.data[2 * r + 1]]
}

fn row4(t: &Tensor, r: usize) -> [f64; 4] {
    [t.data[4 * r], t.data[4 * r + 1], t.data[4 * r + 2], t.data[4 * r + 3]]
}

impl Model {
    /// Builds a model whose parameters are drawn from `seed`.
    pub fn new(config: ModelConfig, stats: DatasetStats, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed);
        let net = Network::new(&config, &mut params)?;
        Ok(Model {
            config,
            stats,
            params,
            net,
        })
    }

    pub fn prepare(&self, episode: &crate::data::Episode) -> Result<PreparedEpisode> {
        let ep = prepare_episode(episode, &self.stats, self.config.ctx_size)?;
        if ep.horizon() != self.config.horizon {
            return Err(Error::Precondition(format!(
                "episode {} has {} prediction frames, model decodes {}",
                ep.episode_id,
                ep.horizon(),
                self.config.horizon
            )));
        }
        Ok(ep)
    }

    pub fn encode(&self, g: &mut Graph, ep: &PreparedEpisode, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Encoded> {
        self.net.encode(&self.config, g, ep, mode, rng)
    }

    pub fn decode(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        ep: &PreparedEpisode,
        copies: usize,
        drive: Drive,
    ) -> Result<Vec<StepVars>> {
        self.net.decode(&self.config, g, enc, ep, copies, drive)
    }

    /// Ground-truth futures as teacher-forcing inputs, one `[A, 2]` node per step.
    pub fn teacher_inputs(&self, g: &mut Graph, ep: &PreparedEpisode) -> Vec<Var> {
        (0..self.config.horizon)
            .map(|t| {
                let data = ep.future.iter().flat_map(|f| [f[t].x, f[t].y]).collect();
                g.input(Tensor::matrix(ep.num_agents(), 2, data))
            })
            .collect()
    }

    /// Standard-normal noise for `rows` rows, one `[rows, 2]` node per step.
    pub fn noise_inputs(&self, g: &mut Graph, rows: usize, rng: &mut ChaCha8Rng) -> Vec<Var> {
        (0..self.config.horizon)
            .map(|_| {
                let data = (0..2 * rows).map(|_| StandardNormal.sample(rng)).collect();
                g.input(Tensor::matrix(rows, 2, data))
            })
            .collect()
    }

    /// `-sum log q` over the rows and steps of a decode.
    pub fn neg_log_density_sum(&self, g: &mut Graph, steps: &[StepVars]) -> Result<Var> {
        network::neg_log_density_sum(g, steps)
    }

    fn read_steps(g: &Graph, steps: &[StepVars]) -> Vec<Vec<FlowStep>> {
        let rows = g.value(steps[0].z).dims2().0;
        let log_q: Vec<Vec<f64>> = steps.iter().map(|s| step_log_q(g, s)).collect();
        (0..rows)
            .map(|r| {
                steps
                    .iter()
                    .zip(&log_q)
                    .map(|(s, lq)| FlowStep {
                        mu_hat: row2(g.value(s.mu_hat), r),
                        sigma_hat: row4(g.value(s.sigma_hat), r),
                        mu: row2(g.value(s.mu), r),
                        sigma: row4(g.value(s.sigma), r),
                        z: row2(g.value(s.z), r),
                        log_q: lq[r],
                    })
                    .collect()
            })
            .collect()
    }

    /// Eval-mode rollout of `copies` hypotheses per agent from explicit noise,
    /// `noise[t][row]` with row `c * A + a`.
    pub fn rollout(&self, ep: &PreparedEpisode, copies: usize, noise: &[Vec<[f64; 2]>]) -> Result<Rollout> {
        let rows = copies * ep.num_agents();
        if noise.iter().any(|n| n.len() != rows) {
            return Err(Error::Precondition(format!("noise must have {rows} rows per step")));
        }
        let mut g = Graph::new(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = self.encode(&mut g, ep, Mode::Eval, &mut rng)?;
        let z: Vec<Var> = noise
            .iter()
            .map(|n| g.input(Tensor::matrix(rows, 2, n.iter().flatten().copied().collect())))
            .collect();
        let steps = self.decode(&mut g, &enc, ep, copies, Drive::Sample(&z))?;
        let positions = (0..rows)
            .map(|r| {
                steps
                    .iter()
                    .map(|s| {
                        let p = row2(g.value(s.pos), r);
                        Position::new(p[0], p[1])
                    })
                    .collect()
            })
            .collect();
        Ok(Rollout {
            positions,
            steps: Self::read_steps(&g, &steps),
        })
    }

    /// Eval-mode teacher-forced pass on `targets[agent][step]`.
    pub fn teacher_forced(&self, ep: &PreparedEpisode, targets: &[Vec<Position>]) -> Result<Vec<Vec<FlowStep>>> {
        if targets.len() != ep.num_agents() || targets.iter().any(|t| t.len() != self.config.horizon) {
            return Err(Error::Precondition("targets must cover every agent and step".into()));
        }
        let mut g = Graph::new(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = self.encode(&mut g, ep, Mode::Eval, &mut rng)?;
        let inputs: Vec<Var> = (0..self.config.horizon)
            .map(|t| {
                let data = targets.iter().flat_map(|f| [f[t].x, f[t].y]).collect();
                g.input(Tensor::matrix(targets.len(), 2, data))
            })
            .collect();
        let steps = self.decode(&mut g, &enc, ep, 1, Drive::Teacher(&inputs))?;
        let out = Self::read_steps(&g, &steps);
        for (a, row) in out.iter().enumerate() {
            for (t, s) in row.iter().enumerate() {
                let det = s.sigma[0] * s.sigma[3] - s.sigma[1] * s.sigma[2];
                if det.abs() < 1e-300 {
                    return Err(Error::Numerical(format!("singular sigma for agent row {a} at step {}", t + 1)));
                }
            }
        }
        Ok(out)
    }

    /// Teacher-forced `log q` of the ground-truth future, `[agent][step]`.
    pub fn log_density(&self, ep: &PreparedEpisode) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .teacher_forced(ep, &ep.future)?
            .into_iter()
            .map(|r| r.into_iter().map(|s| s.log_q).collect())
            .collect())
    }

    /// `k` independent hypotheses per agent, in the episode's own coordinates.
    pub fn sample_k(&self, ep: &PreparedEpisode, k: usize, seed: u64) -> Result<PredictionSet> {
        if k == 0 {
            return Err(Error::Precondition("k must be at least 1".into()));
        }
        let a = ep.num_agents();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<Vec<[f64; 2]>> = (0..self.config.horizon)
            .map(|_| {
                (0..k * a)
                    .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
                    .collect()
            })
            .collect();
        let r = self.rollout(ep, k, &noise)?;
        let agents = ep
            .agent_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| AgentPrediction {
                agent_id: id,
                hypotheses: (0..k)
                    .map(|c| r.positions[c * a + i].iter().map(|&p| p + ep.offset).collect())
                    .collect(),
            })
            .collect();
        Ok(PredictionSet {
            episode_id: ep.episode_id.clone(),
            k,
            agents,
        })
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the parameters to `path` and the configuration and dataset
    /// statistics to `path` + `.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let side = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&Sidecar {
            config: self.config.clone(),
            stats: self.stats,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
        let mut m = Model::new(sc.config, sc.stats, 0)?;
        m.params.load(path)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests;
