use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffnet::layers::update_running_stats;
use crate::diffnet::{BatchStats, Graph, Mode, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::model::{Drive, Model, PreparedEpisode};

/// Rollouts per agent drawn for the reverse cross-entropy.
pub const REVERSE_SAMPLES: usize = 2;
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    /// Mean `-log q` of the ground truth over agents and steps.
    pub forward_ce: f64,
    /// Mean `-log p~` over sampled waypoints.
    pub reverse_ce: f64,
    pub beta: f64,
    pub total: f64,
}

/// Loss nodes of one episode's graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub forward_ce: Var,
    pub reverse_ce: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    pub beta: f64,
    pub n_samples: usize,
    pub mode: Mode,
    /// Build the reverse term even when `beta` is zero, for reporting.
    pub always_reverse: bool,
}

impl LossOptions {
    pub fn train(beta: f64) -> Self {
        LossOptions {
            beta,
            n_samples: REVERSE_SAMPLES,
            mode: Mode::Train,
            always_reverse: true,
        }
    }
}

/// Builds forward and reverse cross-entropy on `g`. `rng` drives dropout and
/// then the reparameterized noise.
pub fn build_loss(
    model: &Model,
    g: &mut Graph,
    ep: &PreparedEpisode,
    opts: &LossOptions,
    rng: &mut ChaCha8Rng,
) -> Result<LossVars> {
    if !(opts.beta >= 0.0) {
        return Err(Error::Precondition(format!("beta must be non-negative, got {}", opts.beta)));
    }
    let enc = model.encode(g, ep, opts.mode, rng)?;
    let targets = model.teacher_inputs(g, ep);
    let tf = model.decode(g, &enc, ep, 1, Drive::Teacher(&targets))?;
    let nll = model.neg_log_density_sum(g, &tf)?;
    let count = (ep.num_agents() * tf.len()) as f64;
    let forward_ce = g.scale(nll, 1.0 / count);
    let mut total = forward_ce;
    let mut reverse_ce = None;
    if opts.n_samples > 0 && (opts.beta > 0.0 || opts.always_reverse) {
        let rows = opts.n_samples * ep.num_agents();
        let noise = model.noise_inputs(g, rows, rng);
        let sampled = model.decode(g, &enc, ep, opts.n_samples, Drive::Sample(&noise))?;
        let mut acc: Option<Var> = None;
        for s in &sampled {
            let lp = g.log_prior(s.pos, ep.prior.clone())?;
            let lp = g.sum(lp);
            acc = Some(match acc {
                Some(a) => g.add(a, lp)?,
                None => lp,
            });
        }
        let acc = acc.expect("at least one decoding step");
        let rev = g.scale(acc, -1.0 / (rows * sampled.len()) as f64);
        if opts.beta > 0.0 {
            let weighted = g.scale(rev, opts.beta);
            total = g.add(forward_ce, weighted)?;
        }
        reverse_ce = Some(rev);
    }
    Ok(LossVars {
        forward_ce,
        reverse_ce,
        total,
    })
}

/// Loss values and parameter gradients of one episode.
pub struct LossEval {
    pub terms: LossTerms,
    pub grads: Vec<(ParamId, Vec<f64>)>,
    pub batch_stats: Vec<BatchStats>,
}

impl LossEval {
    /// Gradients laid out like `ParamStore::flat_values(ids)`; parameters
    /// the loss never touched contribute zeros.
    pub fn flat_grads(&self, params: &ParamStore, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in ids {
            match self.grads.iter().find(|(g, _)| *g == id) {
                Some((_, g)) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, params.value(id).data.len())),
            }
        }
        out
    }
}

pub fn evaluate_loss(
    model: &Model,
    ep: &PreparedEpisode,
    opts: &LossOptions,
    seed: u64,
    with_grads: bool,
) -> Result<LossEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new(&model.params);
    let vars = build_loss(model, &mut g, ep, opts, &mut rng)?;
    let forward_ce = g.scalar(vars.forward_ce);
    let reverse_ce = vars.reverse_ce.map_or(f64::NAN, |v| g.scalar(v));
    let total = g.scalar(vars.total);
    if !total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss on episode {} (forward {forward_ce}, reverse {reverse_ce})",
            ep.episode_id
        )));
    }
    let grads = if with_grads {
        g.backward(vars.total).param_grads(&g)
    } else {
        Vec::new()
    };
    Ok(LossEval {
        terms: LossTerms {
            forward_ce,
            reverse_ce,
            beta: opts.beta,
            total,
        },
        grads,
        batch_stats: g.batch_stats().to_vec(),
    })
}

fn accumulate(model: &mut Model, eval: &LossEval) {
    for (id, g) in &eval.grads {
        for (a, b) in model.params.grad_mut(*id).iter_mut().zip(g) {
            *a += b;
        }
    }
    if !eval.batch_stats.is_empty() {
        update_running_stats(&mut model.params, &eval.batch_stats);
    }
}

/// Mean `-log q` of the ground truth; gradients accumulate into the model.
pub fn forward_ce(model: &mut Model, ep: &PreparedEpisode) -> Result<f64> {
    let opts = LossOptions {
        beta: 0.0,
        n_samples: 0,
        mode: Mode::Eval,
        always_reverse: false,
    };
    let eval = evaluate_loss(model, ep, &opts, 0, true)?;
    accumulate(model, &eval);
    Ok(eval.terms.forward_ce)
}

/// Mean `-log p~` over `n_samples` rollouts per agent; gradients of the
/// reverse term alone accumulate into the model.
pub fn reverse_ce(model: &mut Model, ep: &PreparedEpisode, n_samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grads;
    let value;
    {
        let mut g = Graph::new(&model.params);
        let opts = LossOptions {
            beta: 0.0,
            n_samples,
            mode: Mode::Eval,
            always_reverse: true,
        };
        let vars = build_loss(model, &mut g, ep, &opts, &mut rng)?;
        let rev = vars
            .reverse_ce
            .ok_or_else(|| Error::Precondition("reverse cross-entropy needs n_samples >= 1".into()))?;
        value = g.scalar(rev);
        grads = g.backward(rev).param_grads(&g);
    }
    accumulate(
        model,
        &LossEval {
            terms: LossTerms { forward_ce: f64::NAN, reverse_ce: value, beta: 0.0, total: value },
            grads,
            batch_stats: Vec::new(),
        },
    );
    Ok(value)
}

/// Train-mode symmetric loss `forward + beta * reverse`; gradients accumulate
/// into the model and batch-norm running statistics are updated.
pub fn symmetric_loss(model: &mut Model, ep: &PreparedEpisode, beta: f64, seed: u64) -> Result<LossTerms> {
    let eval = evaluate_loss(model, ep, &LossOptions::train(beta), seed, true)?;
    accumulate(model, &eval);
    Ok(eval.terms)
}
