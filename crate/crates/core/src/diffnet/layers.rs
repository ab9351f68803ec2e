//! Parameter bundles for the layers the model is built from.

use super::graph::{Graph, Mode, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Linear {
            w: store.uniform(&format!("{name}.w"), &[inputs, outputs], inputs)?,
            b: store.uniform(&format!("{name}.b"), &[outputs], inputs)?,
            inputs,
            outputs,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }
}

/// LSTM cell with gate order input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize) -> Result<Self> {
        Ok(LstmCell {
            w_ih: store.uniform(&format!("{name}.w_ih"), &[inputs, 4 * hidden], hidden)?,
            w_hh: store.uniform(&format!("{name}.w_hh"), &[hidden, 4 * hidden], hidden)?,
            b: store.uniform(&format!("{name}.b"), &[4 * hidden], hidden)?,
            hidden,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.hidden;
        let (w_ih, w_hh, b) = (g.param(self.w_ih), g.param(self.w_hh), g.param(self.b));
        let xi = g.linear(x, w_ih, Some(b))?;
        let hh = g.linear(h, w_hh, None)?;
        let z = g.add(xi, hh)?;
        let i = g.slice_cols(z, 0, n)?;
        let f = g.slice_cols(z, n, n)?;
        let u = g.slice_cols(z, 2 * n, n)?;
        let o = g.slice_cols(z, 3 * n, n)?;
        let (i, f, u, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(u), g.sigmoid(o));
        let keep = g.mul(f, c)?;
        let write = g.mul(i, u)?;
        let c_next = g.add(keep, write)?;
        let tc = g.tanh(c_next);
        let h_next = g.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

/// GRU cell with gate order reset, update, candidate and separate input and
/// hidden biases; `h' = (1 - z) n + z h`.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub b_ih: ParamId,
    pub w_hh: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize) -> Result<Self> {
        Ok(GruCell {
            w_ih: store.uniform(&format!("{name}.w_ih"), &[inputs, 3 * hidden], hidden)?,
            b_ih: store.uniform(&format!("{name}.b_ih"), &[3 * hidden], hidden)?,
            w_hh: store.uniform(&format!("{name}.w_hh"), &[hidden, 3 * hidden], hidden)?,
            b_hh: store.uniform(&format!("{name}.b_hh"), &[3 * hidden], hidden)?,
            hidden,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        let (w_ih, b_ih) = (g.param(self.w_ih), g.param(self.b_ih));
        let (w_hh, b_hh) = (g.param(self.w_hh), g.param(self.b_hh));
        let gx = g.linear(x, w_ih, Some(b_ih))?;
        let gh = g.linear(h, w_hh, Some(b_hh))?;
        let (xr, xz, xn) = (g.slice_cols(gx, 0, n)?, g.slice_cols(gx, n, n)?, g.slice_cols(gx, 2 * n, n)?);
        let (hr, hz, hn) = (g.slice_cols(gh, 0, n)?, g.slice_cols(gh, n, n)?, g.slice_cols(gh, 2 * n, n)?);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn)?;
        let cand = g.add(xn, rh)?;
        let cand = g.tanh(cand);
        let diff = g.sub(h, cand)?;
        let zd = g.mul(z, diff)?;
        g.add(cand, zd)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.constant(&format!("{name}.gain"), &[dim], 1.0)?,
            bias: store.constant(&format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// "Same" convolution followed by batch-norm and ReLU.
#[derive(Clone, Copy, Debug)]
pub struct ConvBnRelu {
    pub w: ParamId,
    pub b: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, name: &str, kernel: usize, cin: usize, cout: usize) -> Result<Self> {
        let fan_in = kernel * kernel * cin;
        Ok(ConvBnRelu {
            w: store.uniform(&format!("{name}.w"), &[kernel, kernel, cin, cout], fan_in)?,
            b: store.uniform(&format!("{name}.b"), &[cout], fan_in)?,
            gamma: store.constant(&format!("{name}.bn.gamma"), &[cout], 1.0)?,
            beta: store.constant(&format!("{name}.bn.beta"), &[cout], 0.0)?,
            running_mean: store.buffer(&format!("{name}.bn.running_mean"), &[cout], 0.0)?,
            running_var: store.buffer(&format!("{name}.bn.running_var"), &[cout], 1.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.conv2d(x, w, b)?;
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let y = g.batch_norm(y, gamma, beta, self.running_mean, self.running_var, mode)?;
        Ok(g.relu(y))
    }
}

/// Folds the batch statistics recorded by a train-mode pass into the running buffers.
pub fn update_running_stats(store: &mut ParamStore, graph_stats: &[super::graph::BatchStats]) {
    for s in graph_stats {
        for (r, m) in store.value_mut(s.running_mean).data.iter_mut().zip(&s.mean) {
            *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * m;
        }
        for (r, v) in store.value_mut(s.running_var).data.iter_mut().zip(&s.var) {
            *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * v;
        }
    }
}
