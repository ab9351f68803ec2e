use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{evaluate_loss, symmetric_loss, LossOptions, DEFAULT_BETA, REVERSE_SAMPLES};
use super::optim::{Adam, Plateau, DEFAULT_LR};
use crate::data::{Episode, PredictionSet};
use crate::diffnet::Mode;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{DatasetStats, Model, ModelConfig, PreparedEpisode};

pub const BEST_CHECKPOINT: &str = "best.dfn";
pub const LAST_CHECKPOINT: &str = "last.dfn";
pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Model size preset, `paper` or `desk`.
    pub preset: String,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Plateau patience of the learning-rate schedule.
    pub patience: usize,
    /// Stop after this many validations without improvement.
    pub early_stop: usize,
    /// Hypotheses per agent at validation.
    pub k: usize,
    pub seed: u64,
    /// Rollouts per agent for the reverse cross-entropy.
    pub n_samples: usize,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: "desk".into(),
            alpha: 0.5,
            beta: DEFAULT_BETA,
            lr: DEFAULT_LR,
            epochs: 100,
            patience: 3,
            early_stop: 10,
            k: 12,
            seed: 0,
            n_samples: REVERSE_SAMPLES,
            train_path: None,
            val_path: None,
            out_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 13] = [
        "preset",
        "alpha",
        "beta",
        "lr",
        "epochs",
        "patience",
        "early_stop",
        "k",
        "seed",
        "n_samples",
        "train",
        "val",
        "out",
    ];

    /// Sets one `key=value` entry; unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "preset" => {
                ModelConfig::by_name(v)?;
                self.preset = v.to_string();
            }
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "early_stop" => self.early_stop = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "n_samples" => self.n_samples = parse(key, v)?,
            "train" => self.train_path = Some(PathBuf::from(v)),
            "val" => self.val_path = Some(PathBuf::from(v)),
            "out" => self.out_dir = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.early_stop == 0 {
            return Err(Error::Config("early_stop must be at least 1".into()));
        }
        ModelConfig::by_name(&self.preset)?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::by_name(&self.preset)?;
        m.alpha = self.alpha;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken in this epoch.
    pub steps: usize,
    pub train_loss: f64,
    pub forward_ce: f64,
    pub reverse_ce: f64,
    pub val_avg_ade: f64,
    pub val_avg_fde: f64,
    pub val_forward_ce: f64,
    pub val_min_fde: f64,
    pub val_dac: f64,
    pub val_off_drivable: usize,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "epoch,train_loss,forward_ce,reverse_ce,val_avgADE,val_avgFDE,lr,val_forward_ce,val_minFDE,val_DAC,val_off_drivable,steps";

    pub fn score(&self) -> f64 {
        self.val_avg_ade + self.val_avg_fde
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.forward_ce,
            self.reverse_ce,
            self.val_avg_ade,
            self.val_avg_fde,
            self.lr,
            self.val_forward_ce,
            self.val_min_fde,
            self.val_dac,
            self.val_off_drivable,
            self.steps
        )
    }
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for e in log {
        s.push_str(&e.csv_row());
        s.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub steps: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl fmt::Debug for TrainOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrainOutcome")
            .field("epochs", &self.log.len())
            .field("steps", &self.steps)
            .field("best_epoch", &self.best_epoch)
            .field("stopped_early", &self.stopped_early)
            .finish()
    }
}

fn validation_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1)
}

/// `k` hypotheses per agent for every episode, with a fixed seed per episode
/// so repeated validations are comparable.
pub fn sample_all(model: &Model, episodes: &[PreparedEpisode], k: usize, seed: u64) -> Result<Vec<PredictionSet>> {
    episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| model.sample_k(ep, k, validation_seed(seed, i)))
        .collect()
}

pub struct Validation {
    pub report: MetricsReport,
    pub forward_ce: f64,
}

pub fn validate(
    model: &Model,
    raw: &[Episode],
    prepared: &[PreparedEpisode],
    k: usize,
    seed: u64,
) -> Result<Validation> {
    let preds = sample_all(model, prepared, k, seed)?;
    let report = evaluate(raw, &preds)?;
    let opts = LossOptions {
        beta: 0.0,
        n_samples: 0,
        mode: Mode::Eval,
        always_reverse: false,
    };
    let mut fwd = 0.0;
    for ep in prepared {
        fwd += evaluate_loss(model, ep, &opts, 0, false)?.terms.forward_ce;
    }
    Ok(Validation {
        report,
        forward_ce: fwd / prepared.len() as f64,
    })
}

pub fn prepare_all(model: &Model, episodes: &[Episode]) -> Result<Vec<PreparedEpisode>> {
    episodes.iter().map(|e| model.prepare(e)).collect()
}

/// Builds a fresh model from the configuration and trains it.
pub fn train(train_eps: &[Episode], val_eps: &[Episode], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_eps.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let stats = DatasetStats::from_episodes(train_eps)?;
    let model = Model::new(cfg.model_config()?, stats, cfg.seed)?;
    train_model(model, train_eps, val_eps, cfg)
}

/// Trains `model` with Adam, one episode per step, validating after every
/// epoch. Checkpoints and the log go to `cfg.out_dir` when set. A non-finite
/// loss or gradient aborts with a numerical error and leaves the checkpoints
/// of the last completed epoch in place.
pub fn train_model(
    mut model: Model,
    train_eps: &[Episode],
    val_eps: &[Episode],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_eps.is_empty() || val_eps.is_empty() {
        return Err(Error::Precondition("training and validation sets must be non-empty".into()));
    }
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let train_prep = prepare_all(&model, train_eps)?;
    let val_prep = prepare_all(&model, val_eps)?;
    let mut opt = Adam::new(cfg.lr)?;
    let mut sched = Plateau::new(cfg.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_7A1B);
    let mut order: Vec<usize> = (0..train_prep.len()).collect();
    let mut log = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut stale = 0;
    let mut steps = 0;
    let mut stopped_early = false;
    model.params.zero_grad();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = opt.lr;
        let (mut total, mut fwd, mut rev) = (0.0, 0.0, 0.0);
        for &i in &order {
            let step_seed: u64 = rng.random();
            let terms = symmetric_loss(&mut model, &train_prep[i], cfg.beta, step_seed)?;
            if !model.params.grads_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient on episode {} in epoch {epoch}",
                    train_prep[i].episode_id
                )));
            }
            opt.step(&mut model.params);
            steps += 1;
            total += terms.total;
            fwd += terms.forward_ce;
            rev += terms.reverse_ce;
        }
        let n = order.len() as f64;
        let val = validate(&model, val_eps, &val_prep, cfg.k, cfg.seed)?;
        let entry = EpochLog {
            epoch,
            steps: order.len(),
            train_loss: total / n,
            forward_ce: fwd / n,
            reverse_ce: rev / n,
            val_avg_ade: val.report.avg_ade,
            val_avg_fde: val.report.avg_fde,
            val_forward_ce: val.forward_ce,
            val_min_fde: val.report.min_fde,
            val_dac: val.report.dac,
            val_off_drivable: val.report.off_drivable_waypoints(),
            lr,
        };
        let score = entry.score();
        if !score.is_finite() || !val.forward_ce.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation in epoch {epoch}")));
        }
        log::info!(
            "epoch {epoch}: loss {:.4} fwd {:.4} rev {:.4} val avgADE {:.3} avgFDE {:.3} fwd {:.4} lr {:.2e}",
            entry.train_loss,
            entry.forward_ce,
            entry.reverse_ce,
            entry.val_avg_ade,
            entry.val_avg_fde,
            entry.val_forward_ce,
            lr
        );
        log.push(entry);
        let improved = score < best.0;
        if improved {
            best = (score, epoch, model.params.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        sched.observe(score, &mut opt);
        if let Some(dir) = &cfg.out_dir {
            if improved {
                model.save(&dir.join(BEST_CHECKPOINT))?;
            }
            model.save(&dir.join(LAST_CHECKPOINT))?;
            write_train_log(&dir.join(TRAIN_LOG), &log)?;
        }
        if stale >= cfg.early_stop {
            stopped_early = true;
            break;
        }
    }
    if !log.is_empty() {
        model.params = best.2;
    }
    Ok(TrainOutcome {
        model,
        log,
        steps,
        best_epoch: best.1,
        stopped_early,
    })
}
