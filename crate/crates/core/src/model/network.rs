//! Graph construction for the encoder, scene backbone and flow decoder.

use rand::Rng;

use super::config::ModelConfig;
use super::input::PreparedEpisode;
use crate::data::{GridGeometry, Position};
use crate::diffnet::layers::{ConvBnRelu, GruCell, LayerNorm, Linear, LstmCell};
use crate::diffnet::{Graph, Mode, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scenemap::CONTEXT_CHANNELS;

pub const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug)]
pub(crate) struct Network {
    embed: Linear,
    lstm: LstmCell,
    ln: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    conv: [ConvBnRelu; 4],
    gru: GruCell,
    f_h: Linear,
    f_gamma: Linear,
    att_w: ParamId,
    local1: Linear,
    local2: Linear,
    head1: Linear,
    head2: Linear,
    head3: Linear,
}

impl Network {
    pub(crate) fn new(cfg: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        let e = cfg.enc_hidden;
        let [c1, c2, c3, c4] = cfg.conv_channels;
        Ok(Network {
            embed: Linear::new(store, "enc.embed", 2, e)?,
            lstm: LstmCell::new(store, "enc.lstm", e, e)?,
            ln: LayerNorm::new(store, "enc.ln", e)?,
            query: Linear::new(store, "enc.query", e, e)?,
            key: Linear::new(store, "enc.key", e, e)?,
            value: Linear::new(store, "enc.value", e, e)?,
            conv: [
                ConvBnRelu::new(store, "scene.conv1", 3, CONTEXT_CHANNELS, c1)?,
                ConvBnRelu::new(store, "scene.conv2", 3, c1, c2)?,
                ConvBnRelu::new(store, "scene.conv3", 5, c2, c3)?,
                ConvBnRelu::new(store, "scene.conv4", 1, c3, c4)?,
            ],
            gru: GruCell::new(store, "dec.gru", 2 * cfg.horizon, cfg.dec_hidden)?,
            f_h: Linear::new(store, "dec.f_h", cfg.dec_hidden, cfg.att_dim)?,
            f_gamma: Linear::new(store, "dec.f_gamma", c3, cfg.att_dim)?,
            att_w: store.uniform("dec.att_w", &[cfg.att_dim], cfg.att_dim)?,
            local1: Linear::new(store, "dec.local1", e + c4, cfg.fc_hidden)?,
            local2: Linear::new(store, "dec.local2", cfg.fc_hidden, cfg.fc_hidden)?,
            head1: Linear::new(store, "dec.head1", c3 + cfg.dec_hidden + cfg.fc_hidden, cfg.fc_hidden)?,
            head2: Linear::new(store, "dec.head2", cfg.fc_hidden, cfg.fc_hidden)?,
            head3: Linear::new(store, "dec.head3", cfg.fc_hidden, 6)?,
        })
    }
}

/// Encoder and backbone outputs for one episode.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Final encoder LSTM states `[A, e]`.
    pub h0: Var,
    /// Interaction-fused encodings `[A, e]`.
    pub h_tilde: Var,
    /// Global scene features flattened to `[P, C]`.
    pub gamma_g: Var,
    /// Per-pixel attention projection `[P, att_dim]`.
    pub f_gamma: Var,
    /// Local scene features `[L, L, c4]`.
    pub gamma_l: Var,
    pub local_geom: GridGeometry,
}

/// Graph nodes of one decoding step over all rows.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub mu_hat: Var,
    pub sigma_hat: Var,
    pub sigma: Var,
    pub mu: Var,
    pub z: Var,
    pub pos: Var,
}

/// How the decoder advances: by transforming given noise, or by conditioning
/// on given positions and inverting the flow.
#[derive(Clone, Copy, Debug)]
pub enum Drive<'a> {
    Sample(&'a [Var]),
    Teacher(&'a [Var]),
}

fn positions_tensor(rows: impl Iterator<Item = Position>) -> Tensor {
    let data: Vec<f64> = rows.flat_map(|p| [p.x, p.y]).collect();
    Tensor::matrix(data.len() / 2, 2, data)
}

impl Network {
    pub(crate) fn encode(
        &self,
        cfg: &ModelConfig,
        g: &mut Graph,
        ep: &PreparedEpisode,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Encoded> {
        let a = ep.num_agents();
        if a == 0 {
            return Err(Error::Precondition("episode without agents".into()));
        }
        if ep.past.iter().any(|p| p.len() != cfg.past_len) {
            return Err(Error::Precondition(format!("every agent needs {} past positions", cfg.past_len)));
        }
        let e = cfg.enc_hidden;
        let mut h = g.input(Tensor::zeros(&[a, e]));
        let mut c = g.input(Tensor::zeros(&[a, e]));
        for t in 0..cfg.past_len {
            let diffs = positions_tensor(ep.past.iter().map(|p| {
                if t == 0 {
                    Position::ORIGIN
                } else {
                    p[t] - p[t - 1]
                }
            }));
            let x = g.input(diffs);
            let x = self.embed.forward(g, x)?;
            (h, c) = self.lstm.forward(g, x, h, c)?;
        }
        let h0 = h;
        let hl = self.ln.forward(g, h0)?;
        let q = self.query.forward(g, hl)?;
        let k = self.key.forward(g, hl)?;
        let v = self.value.forward(g, hl)?;
        let att = g.scaled_dot_attention(q, k, v)?;
        let h_tilde = g.add(h0, att)?;

        let s = cfg.ctx_size;
        if ep.context.shape != [s, s, CONTEXT_CHANNELS] {
            return Err(Error::shape(
                "scene_backbone",
                format!("context {:?}, expected [{s}, {s}, {CONTEXT_CHANNELS}]", ep.context.shape),
            ));
        }
        let x = g.input(ep.context.clone());
        let x = self.conv[0].forward(g, x, mode)?;
        let x = self.conv[1].forward(g, x, mode)?;
        let x = g.max_pool2(x)?;
        let conv3 = self.conv[2].forward(g, x, mode)?;
        let conv4 = self.conv[3].forward(g, conv3, mode)?;
        let global = g.dropout(conv3, cfg.dropout, mode, rng);
        let gs = cfg.global_size();
        let gamma_g = g.reshape(global, &[gs * gs, cfg.conv_channels[2]])?;
        let f_gamma = self.f_gamma.forward(g, gamma_g)?;
        let gamma_l = g.upsample_bilinear(conv4, cfg.local_size, cfg.local_size)?;
        Ok(Encoded {
            h0,
            h_tilde,
            gamma_g,
            f_gamma,
            gamma_l,
            local_geom: ep.mask.geometry().resampled(cfg.local_size),
        })
    }

    /// Unrolls the decoder over `rows = copies * A` rows, where row
    /// `c * A + a` belongs to agent `a`.
    pub(crate) fn decode(
        &self,
        cfg: &ModelConfig,
        g: &mut Graph,
        enc: &Encoded,
        ep: &PreparedEpisode,
        copies: usize,
        drive: Drive,
    ) -> Result<Vec<StepVars>> {
        let a = ep.num_agents();
        let n = a * copies;
        let horizon = cfg.horizon;
        let inputs = match drive {
            Drive::Sample(v) | Drive::Teacher(v) => v,
        };
        if inputs.len() != horizon {
            return Err(Error::Precondition(format!("{} decoder inputs for horizon {horizon}", inputs.len())));
        }
        let tile = |g: &mut Graph, v: Var| if copies == 1 { v } else { g.repeat_rows(v, copies) };
        let last = cfg.past_len - 1;
        let s0 = g.input(positions_tensor((0..n).map(|r| ep.past[r % a][last])));
        let s_m1 = g.input(positions_tensor((0..n).map(|r| ep.past[r % a][last - 1])));
        let h_tilde = tile(g, enc.h_tilde);
        let att_w = g.param(self.att_w);
        let mut hist = vec![s0];
        let mut prev2 = s_m1;
        let mut h = g.input(Tensor::zeros(&[n, cfg.dec_hidden]));
        let mut steps = Vec::with_capacity(horizon);
        for (t, &input) in inputs.iter().enumerate() {
            let prev = hist[t];
            let mut parts = hist.clone();
            if hist.len() < horizon {
                parts.push(g.input(Tensor::zeros(&[n, 2 * (horizon - hist.len())])));
            }
            let flat = g.concat_cols(&parts)?;
            h = self.gru.forward(g, flat, h)?;

            let fh = self.f_h.forward(g, h)?;
            let weights = g.additive_attention(fh, enc.f_gamma, att_w)?;
            let pooled = g.matmul(weights, enc.gamma_g)?;

            let local = g.bilinear_sample(enc.gamma_l, prev, enc.local_geom)?;
            let hg = g.concat_cols(&[h_tilde, local])?;
            let lc = self.local1.forward(g, hg)?;
            let lc = g.softplus(lc);
            let lc = self.local2.forward(g, lc)?;
            let lc = g.softplus(lc);

            let gc = g.concat_cols(&[pooled, h, lc])?;
            let x = self.head1.forward(g, gc)?;
            let x = g.softplus(x);
            let x = self.head2.forward(g, x)?;
            let x = g.tanh(x);
            let out = self.head3.forward(g, x)?;
            let mu_hat = g.slice_cols(out, 0, 2)?;
            let sigma_hat = g.slice_cols(out, 2, 4)?;

            let sigma = g.expm2x2(sigma_hat)?;
            let vel = g.sub(prev, prev2)?;
            let vel = g.scale(vel, cfg.alpha);
            let anchor = g.add(prev, vel)?;
            let mu = g.add(anchor, mu_hat)?;
            let (z, pos) = match drive {
                Drive::Sample(_) => {
                    let dx = g.matvec2(sigma, input)?;
                    (input, g.add(dx, mu)?)
                }
                Drive::Teacher(_) => {
                    let neg = g.scale(sigma_hat, -1.0);
                    let inv = g.expm2x2(neg)?;
                    let r = g.sub(input, mu)?;
                    (g.matvec2(inv, r)?, input)
                }
            };
            if let Some(op) = g.first_non_finite() {
                return Err(Error::Numerical(format!("non-finite value from {op} at decoding step {}", t + 1)));
            }
            steps.push(StepVars {
                mu_hat,
                sigma_hat,
                sigma,
                mu,
                z,
                pos,
            });
            prev2 = prev;
            hist.push(pos);
        }
        Ok(steps)
    }
}

/// `sum over rows and steps of -log q = 1/2 |z|^2 + tr(sigma_hat) + log 2 pi`.
pub(crate) fn neg_log_density_sum(g: &mut Graph, steps: &[StepVars]) -> Result<Var> {
    let trace_sel = g.input(Tensor::matrix(4, 1, vec![1.0, 0.0, 0.0, 1.0]));
    let mut terms = Vec::with_capacity(2 * steps.len());
    let mut count = 0usize;
    for s in steps {
        let zz = g.mul(s.z, s.z)?;
        let zz = g.sum(zz);
        terms.push(g.scale(zz, 0.5));
        let tr = g.linear(s.sigma_hat, trace_sel, None)?;
        count += g.value(tr).len();
        terms.push(g.sum(tr));
    }
    let mut total = g.input(Tensor::from_vec(vec![count as f64 * LOG_2PI]));
    for t in terms {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Per-row `log q` of one step, read from node values.
pub(crate) fn step_log_q(g: &Graph, s: &StepVars) -> Vec<f64> {
    let z = &g.value(s.z).data;
    let sh = &g.value(s.sigma_hat).data;
    (0..z.len() / 2)
        .map(|r| -LOG_2PI - 0.5 * (z[2 * r].powi(2) + z[2 * r + 1].powi(2)) - (sh[4 * r] + sh[4 * r + 3]))
        .collect()
}
