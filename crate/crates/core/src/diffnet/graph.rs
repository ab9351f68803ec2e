//! Reverse-mode tape over a fixed vocabulary of coarse operators.
//!
//! Rank-2 tensors are `[rows, cols]`; images are channels-last `[H, W, C]`.
//! Every operator stores whatever its backward rule needs at forward time.

use std::sync::Arc;

use rand::Rng;

use super::expm::{expm2x2, expm2x2_vjp};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::data::{GridGeometry, Position};
use crate::error::{Error, Result};
use crate::scenemap::{clamp_axis, PTilde};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    RepeatRows { x: Var, times: usize },
    Reshape(Var),
    Sum(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, weights: Vec<f64> },
    AdditiveAttention { fh: Var, fg: Var, w: Var },
    Conv2d { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, train: bool },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Upsample { x: Var },
    Gather { feat: Var, pos: Var, geom: GridGeometry },
    Expm(Var),
    MatVec2 { m: Var, v: Var },
    LogPrior { pos: Var, prior: Arc<PTilde> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Linear { .. } => "linear",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::ConcatCols(_) => "concat",
            Op::SliceCols { .. } => "slice",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "scaled_dot_attention",
            Op::AdditiveAttention { .. } => "additive_attention",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::MaxPool2 { .. } => "max_pool",
            Op::Dropout { .. } => "dropout",
            Op::Upsample { .. } => "upsample",
            Op::Gather { .. } => "bilinear_sample",
            Op::Expm(_) => "expm2x2",
            Op::MatVec2 { .. } => "matvec2",
            Op::LogPrior { .. } => "log_prior",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics observed by a train-mode batch-norm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    batch_stats: Vec<BatchStats>,
    first_non_finite: Option<(usize, &'static str)>,
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::shape(op, detail)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            batch_stats: Vec::new(),
            first_non_finite: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first operator that produced a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite.map(|(_, n)| n)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.batch_stats
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(self.params.value(id).clone(), Op::Param);
        self.param_vars[id] = Some(v);
        v
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    // ---------------------------------------------------------------- affine

    /// `x W + b` for `x: [n, i]`, `W: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = self.dims2(x);
        let ws = &self.value(w).shape;
        if ws.len() != 2 || ws[0] != i {
            return Err(shape_err("linear", format!("x is [{n}, {i}] but W is {ws:?}")));
        }
        let o = ws[1];
        if let Some(b) = b {
            if self.value(b).len() != o {
                return Err(shape_err("linear", format!("bias has {} values, W has {o} outputs", self.value(b).len())));
            }
        }
        let mut out = vec![0.0; n * o];
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            for r in 0..n {
                let row = &mut out[r * o..(r + 1) * o];
                if let Some(b) = b {
                    row.copy_from_slice(&self.value(b).data);
                }
                for k in 0..i {
                    let a = xv[r * i + k];
                    if a == 0.0 {
                        continue;
                    }
                    let wr = &wv[k * o..(k + 1) * o];
                    for (y, &wk) in row.iter_mut().zip(wr) {
                        *y += a * wk;
                    }
                }
            }
        }
        Ok(self.push(Tensor::matrix(n, o, out), Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a);
        let (k2, m) = self.dims2(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("[{n}, {k}] x [{k2}, {m}]")));
        }
        let mut out = vec![0.0; n * m];
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        for r in 0..n {
            let row = &mut out[r * m..(r + 1) * m];
            for kk in 0..k {
                let s = av[r * k + kk];
                if s == 0.0 {
                    continue;
                }
                for (y, &bb) in row.iter_mut().zip(&bv[kk * m..(kk + 1) * m]) {
                    *y += s * bb;
                }
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b)))
    }

    // ------------------------------------------------------------ elementwise

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(shape_err(op.name(), format!("{:?} vs {:?}", va.shape, vb.shape)));
        }
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor { shape: va.shape.clone(), data };
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| f(a)).collect(),
        };
        self.push(t, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |a| a.max(0.0))
    }

    /// `max(x, 0) + log1p(exp(-|x|))`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    // ------------------------------------------------------------- structural

    /// Concatenates `[n, d_i]` blocks along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims2(p).1).collect();
        if let Some(&p) = parts.iter().find(|&&p| self.dims2(p).0 != n) {
            return Err(shape_err("concat", format!("row count {} vs {n}", self.dims2(p).0)));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::matrix(n, total, out), Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims2(x);
        if start + len > d {
            return Err(shape_err("slice", format!("cols {start}..{} of {d}", start + len)));
        }
        let v = &self.value(x).data;
        let out: Vec<f64> = (0..n).flat_map(|r| v[r * d + start..r * d + start + len].iter().copied()).collect();
        Ok(self.push(Tensor::matrix(n, len, out), Op::SliceCols { x, start }))
    }

    /// Tiles `[a, d]` into `[a * times, d]`; row `t * a + i` is row `i`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (a, d) = self.dims2(x);
        let v = &self.value(x).data;
        let mut out = Vec::with_capacity(a * d * times);
        for _ in 0..times {
            out.extend_from_slice(v);
        }
        self.push(Tensor::matrix(a * times, d, out), Op::RepeatRows { x, times })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::new(shape.to_vec(), v.data.clone())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::from_vec(vec![s]), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    // ---------------------------------------------------------- normalization

    /// Row-wise layer normalization with `eps = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims2(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm", format!("feature dim {d} vs gain/bias")));
        }
        let xv = &self.value(x).data;
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(Tensor::matrix(n, d, out), Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Per-channel batch normalization of an `[H, W, C]` map. Train mode uses the
    /// map's own statistics and records them; eval mode uses the running buffers.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.value(x).shape.clone();
        let ch = *shape.last().unwrap_or(&0);
        if self.value(gamma).len() != ch || self.value(beta).len() != ch {
            return Err(shape_err("batch_norm", format!("{ch} channels vs gamma/beta")));
        }
        let xv = &self.value(x).data;
        let n = xv.len() / ch.max(1);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; ch];
                for px in xv.chunks_exact(ch) {
                    for (m, v) in mean.iter_mut().zip(px) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; ch];
                for px in xv.chunks_exact(ch) {
                    for c in 0..ch {
                        var[c] += (px[c] - mean[c]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var)
            }
            Mode::Eval => (
                self.params.value(running_mean).data.clone(),
                self.params.value(running_var).data.clone(),
            ),
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, (&v, (h, o))) in xv.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let c = i % ch;
            *h = (v - mean[c]) * rstd[c];
            *o = g[c] * *h + b[c];
        }
        if mode == Mode::Train {
            let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            self.batch_stats.push(BatchStats {
                running_mean,
                running_var,
                mean,
                var: var.iter().map(|v| v * unbiased).collect(),
            });
        }
        let t = Tensor { shape, data: out };
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, xhat, rstd, train: mode == Mode::Train }))
    }

    // -------------------------------------------------------------- attention

    /// `softmax(Q K^T / sqrt(d)) V` with one query per row.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (nq, d) = self.dims2(q);
        let (nk, dk) = self.dims2(k);
        let (nv, dv) = self.dims2(v);
        if nk == 0 {
            return Err(Error::Precondition("attention over zero agents".into()));
        }
        if d != dk || nk != nv {
            return Err(shape_err("scaled_dot_attention", format!("Q [{nq},{d}] K [{nk},{dk}] V [{nv},{dv}]")));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (qv, kv, vv) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);
        let mut weights = vec![0.0; nq * nk];
        for a in 0..nq {
            let row = &mut weights[a * nk..(a + 1) * nk];
            for (b, w) in row.iter_mut().enumerate() {
                *w = qv[a * d..(a + 1) * d]
                    .iter()
                    .zip(&kv[b * d..(b + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
                    * scale;
            }
            softmax_in_place(row);
        }
        let mut out = vec![0.0; nq * dv];
        for a in 0..nq {
            for b in 0..nk {
                let w = weights[a * nk + b];
                for (o, &x) in out[a * dv..(a + 1) * dv].iter_mut().zip(&vv[b * dv..(b + 1) * dv]) {
                    *o += w * x;
                }
            }
        }
        Ok(self.push(Tensor::matrix(nq, dv, out), Op::Attention { q, k, v, weights }))
    }

    /// Attention weights of each query row over the pixels of `fg`:
    /// `softmax_p(w . relu(fh_i + fg_p))`, output `[n, P]`.
    pub fn additive_attention(&mut self, fh: Var, fg: Var, w: Var) -> Result<Var> {
        let (n, d) = self.dims2(fh);
        let (p, d2) = self.dims2(fg);
        if d != d2 || self.value(w).len() != d {
            return Err(shape_err(
                "additive_attention",
                format!("fh [{n},{d}] fg [{p},{d2}] w {}", self.value(w).len()),
            ));
        }
        let (hv, gv, wv) = (&self.value(fh).data, &self.value(fg).data, &self.value(w).data);
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let h = &hv[i * d..(i + 1) * d];
            let row = &mut out[i * p..(i + 1) * p];
            for (px, s) in row.iter_mut().enumerate() {
                let g = &gv[px * d..(px + 1) * d];
                let mut acc = 0.0;
                for j in 0..d {
                    let pre = h[j] + g[j];
                    if pre > 0.0 {
                        acc += wv[j] * pre;
                    }
                }
                *s = acc;
            }
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::matrix(n, p, out), Op::AdditiveAttention { fh, fg, w }))
    }

    // ----------------------------------------------------------------- vision

    /// Stride-1 "same" convolution. `x: [H, W, Cin]`, `w: [kh, kw, Cin, Cout]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        let ws = self.value(w).shape.clone();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != xs[2] || self.value(b).len() != ws[3] {
            return Err(shape_err("conv2d", format!("x {xs:?} w {ws:?}")));
        }
        let (h, wd, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
        let (ph, pw) = (kh / 2, kw / 2);
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let bv = &self.value(b).data;
        let mut out = vec![0.0; h * wd * cout];
        for r in 0..h {
            for c in 0..wd {
                let o = &mut out[(r * wd + c) * cout..(r * wd + c + 1) * cout];
                o.copy_from_slice(bv);
                for dr in 0..kh {
                    let rr = r as isize + dr as isize - ph as isize;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for dc in 0..kw {
                        let cc = c as isize + dc as isize - pw as isize;
                        if cc < 0 || cc >= wd as isize {
                            continue;
                        }
                        let xi = &xv[(rr as usize * wd + cc as usize) * cin..][..cin];
                        let wk = &wv[(dr * kw + dc) * cin * cout..][..cin * cout];
                        for (ci, &a) in xi.iter().enumerate() {
                            if a == 0.0 {
                                continue;
                            }
                            for (y, &ww) in o.iter_mut().zip(&wk[ci * cout..(ci + 1) * cout]) {
                                *y += a * ww;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(vec![h, wd, cout], out)?, Op::Conv2d { x, w, b }))
    }

    /// 2x2 max pooling with stride 2 (ties go to the first element in row-major order).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        if xs.len() != 3 || !xs[0].is_multiple_of(2) || !xs[1].is_multiple_of(2) {
            return Err(shape_err("max_pool", format!("{xs:?}")));
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = &self.value(x).data;
        let mut out = vec![0.0; oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        for r in 0..oh {
            for cc in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((2 * r + dr) * w + 2 * cc + dc) * c + ch;
                        if xv[i] > best {
                            best = xv[i];
                            at = i;
                        }
                    }
                    let o = (r * ow + cc) * c + ch;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![oh, ow, c], out)?, Op::MaxPool2 { x, argmax }))
    }

    /// Inverted dropout; identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut impl Rng) -> Var {
        if mode == Mode::Eval || p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        self.push(t, Op::Dropout { x, mask })
    }

    /// Bilinear resize of `[H, W, C]` to `[oh, ow, C]` (half-pixel centers).
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        if xs.len() != 3 {
            return Err(shape_err("upsample", format!("{xs:?}")));
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let xv = &self.value(x).data;
        let mut out = vec![0.0; oh * ow * c];
        for r in 0..oh {
            let (r0, r1, fr) = upsample_coord(r, h, oh);
            for cc in 0..ow {
                let (c0, c1, fc) = upsample_coord(cc, w, ow);
                let o = &mut out[(r * ow + cc) * c..][..c];
                for ch in 0..c {
                    let v00 = xv[(r0 * w + c0) * c + ch];
                    let v01 = xv[(r0 * w + c1) * c + ch];
                    let v10 = xv[(r1 * w + c0) * c + ch];
                    let v11 = xv[(r1 * w + c1) * c + ch];
                    o[ch] = (1.0 - fr) * ((1.0 - fc) * v00 + fc * v01) + fr * ((1.0 - fc) * v10 + fc * v11);
                }
            }
        }
        Ok(self.push(Tensor::new(vec![oh, ow, c], out)?, Op::Upsample { x }))
    }

    /// Bilinear gather of an `[H, W, C]` feature map at world positions `pos: [n, 2]`.
    /// Queries outside the pixel-center hull replicate the border.
    pub fn bilinear_sample(&mut self, feat: Var, pos: Var, geom: GridGeometry) -> Result<Var> {
        let fs = self.value(feat).shape.clone();
        let (n, two) = self.dims2(pos);
        if fs.len() != 3 || two != 2 || fs[0] != geom.height || fs[1] != geom.width {
            return Err(shape_err("bilinear_sample", format!("feature {fs:?}, pos [{n}, {two}]")));
        }
        let (h, w, c) = (fs[0], fs[1], fs[2]);
        let fv = &self.value(feat).data;
        let pv = &self.value(pos).data;
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let (r, cc) = geom.to_pixel(Position::new(pv[2 * i], pv[2 * i + 1]));
            let s = BilinearStencil::new(r, cc, h, w);
            for (ch, o) in out[i * c..(i + 1) * c].iter_mut().enumerate() {
                *o = s.blend(|rr, ccc| fv[(rr * w + ccc) * c + ch]);
            }
        }
        Ok(self.push(Tensor::matrix(n, c, out), Op::Gather { feat, pos, geom }))
    }

    // ------------------------------------------------------------------- flow

    /// Row-wise 2x2 matrix exponential of `[n, 4]` row-major matrices.
    pub fn expm2x2(&mut self, m: Var) -> Result<Var> {
        let (n, four) = self.dims2(m);
        if four != 4 {
            return Err(shape_err("expm2x2", format!("[{n}, {four}]")));
        }
        let mv = &self.value(m).data;
        let out: Vec<f64> = mv
            .chunks_exact(4)
            .flat_map(|r| expm2x2([r[0], r[1], r[2], r[3]]))
            .collect();
        Ok(self.push(Tensor::matrix(n, 4, out), Op::Expm(m)))
    }

    /// Row-wise `M v` for `M: [n, 4]` (row-major 2x2) and `v: [n, 2]`.
    pub fn matvec2(&mut self, m: Var, v: Var) -> Result<Var> {
        let (n, four) = self.dims2(m);
        let (n2, two) = self.dims2(v);
        if four != 4 || two != 2 || n != n2 {
            return Err(shape_err("matvec2", format!("M [{n}, {four}] v [{n2}, {two}]")));
        }
        let (mv, vv) = (&self.value(m).data, &self.value(v).data);
        let mut out = vec![0.0; 2 * n];
        for i in 0..n {
            let (a, b, c, d) = (mv[4 * i], mv[4 * i + 1], mv[4 * i + 2], mv[4 * i + 3]);
            let (x, y) = (vv[2 * i], vv[2 * i + 1]);
            out[2 * i] = a * x + b * y;
            out[2 * i + 1] = c * x + d * y;
        }
        Ok(self.push(Tensor::matrix(n, 2, out), Op::MatVec2 { m, v }))
    }

    /// Penalized log-prior at each row of `pos: [n, 2]`, output `[n, 1]`.
    pub fn log_prior(&mut self, pos: Var, prior: Arc<PTilde>) -> Result<Var> {
        let (n, two) = self.dims2(pos);
        if two != 2 {
            return Err(shape_err("log_prior", format!("pos [{n}, {two}]")));
        }
        let pv = &self.value(pos).data;
        let out: Vec<f64> = (0..n)
            .map(|i| prior.log_p_tilde_penalized(Position::new(pv[2 * i], pv[2 * i + 1])).0)
            .collect();
        Ok(self.push(Tensor::matrix(n, 1, out), Op::LogPrior { pos, prior }))
    }

    // --------------------------------------------------------------- backward

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        self.backward_from(&[(loss, vec![1.0])])
    }

    /// Reverse pass seeded with explicit output cotangents.
    pub fn backward_from(&self, seeds: &[(Var, Vec<f64>)]) -> Gradients {
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(g.len(), self.value(*v).len(), "seed length");
            acc(&mut grads, *v, self.value(*v).len())
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += b);
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            if grads[idx].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = g;
        }
        Gradients { grads }
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (n, i) = self.dims2(*x);
                let o = self.value(*w).shape[1];
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                {
                    let gx = acc(grads, *x, n * i);
                    for r in 0..n {
                        let gr = &g[r * o..(r + 1) * o];
                        for k in 0..i {
                            gx[r * i + k] += dot(gr, &wv[k * o..(k + 1) * o]);
                        }
                    }
                }
                {
                    let gw = acc(grads, *w, i * o);
                    for r in 0..n {
                        let gr = &g[r * o..(r + 1) * o];
                        for k in 0..i {
                            let a = xv[r * i + k];
                            if a != 0.0 {
                                axpy(&mut gw[k * o..(k + 1) * o], a, gr);
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let gb = acc(grads, *b, o);
                    for r in 0..n {
                        axpy(gb, 1.0, &g[r * o..(r + 1) * o]);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.dims2(*a);
                let m = self.dims2(*b).1;
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                {
                    let ga = acc(grads, *a, n * k);
                    for r in 0..n {
                        for kk in 0..k {
                            ga[r * k + kk] += dot(&g[r * m..(r + 1) * m], &bv[kk * m..(kk + 1) * m]);
                        }
                    }
                }
                let gb = acc(grads, *b, k * m);
                for r in 0..n {
                    for kk in 0..k {
                        let s = av[r * k + kk];
                        if s != 0.0 {
                            axpy(&mut gb[kk * m..(kk + 1) * m], s, &g[r * m..(r + 1) * m]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                axpy(acc(grads, *a, g.len()), 1.0, g);
                axpy(acc(grads, *b, g.len()), 1.0, g);
            }
            Op::Sub(a, b) => {
                axpy(acc(grads, *a, g.len()), 1.0, g);
                axpy(acc(grads, *b, g.len()), -1.0, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
                let gb = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
            Op::Scale(x, c) => axpy(acc(grads, *x, g.len()), *c, g),
            Op::Sigmoid(x) => {
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    let s = out.data[i];
                    gx[i] += g[i] * s * (1.0 - s);
                }
            }
            Op::Tanh(x) => {
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    let t = out.data[i];
                    gx[i] += g[i] * (1.0 - t * t);
                }
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = &self.value(*x).data;
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * sigmoid(xv[i]);
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = out.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.dims2(p).1;
                    let gp = acc(grads, p, n * w);
                    for r in 0..n {
                        axpy(&mut gp[r * w..(r + 1) * w], 1.0, &g[r * total + off..r * total + off + w]);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, d) = self.dims2(*x);
                let len = out.dims2().1;
                let gx = acc(grads, *x, n * d);
                for r in 0..n {
                    axpy(&mut gx[r * d + start..r * d + start + len], 1.0, &g[r * len..(r + 1) * len]);
                }
            }
            Op::RepeatRows { x, times } => {
                let len = self.value(*x).len();
                let gx = acc(grads, *x, len);
                for t in 0..*times {
                    axpy(gx, 1.0, &g[t * len..(t + 1) * len]);
                }
            }
            Op::Reshape(x) => axpy(acc(grads, *x, g.len()), 1.0, g),
            Op::Sum(x) => {
                let len = self.value(*x).len();
                acc(grads, *x, len).iter_mut().for_each(|v| *v += g[0]);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (n, d) = self.dims2(*x);
                let gv = &self.value(*gain).data;
                {
                    let gg = acc(grads, *gain, d);
                    for r in 0..n {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                {
                    let gb = acc(grads, *bias, d);
                    for r in 0..n {
                        axpy(gb, 1.0, &g[r * d..(r + 1) * d]);
                    }
                }
                let gx = acc(grads, *x, n * d);
                for r in 0..n {
                    let dxhat: Vec<f64> = (0..d).map(|j| g[r * d + j] * gv[j]).collect();
                    let h = &xhat[r * d..(r + 1) * d];
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] += rstd[r] / d as f64 * (d as f64 * dxhat[j] - s1 - h[j] * s2);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let ch = rstd.len();
                let n = xhat.len() / ch;
                let gv = &self.value(*gamma).data;
                let mut sum_g = vec![0.0; ch];
                let mut sum_gh = vec![0.0; ch];
                for i in 0..xhat.len() {
                    let c = i % ch;
                    sum_g[c] += g[i];
                    sum_gh[c] += g[i] * xhat[i];
                }
                axpy(acc(grads, *gamma, ch), 1.0, &sum_gh);
                axpy(acc(grads, *beta, ch), 1.0, &sum_g);
                let gx = acc(grads, *x, xhat.len());
                if *train {
                    for i in 0..xhat.len() {
                        let c = i % ch;
                        gx[i] += gv[c] * rstd[c] / n as f64
                            * (n as f64 * g[i] - sum_g[c] - xhat[i] * sum_gh[c]);
                    }
                } else {
                    for i in 0..xhat.len() {
                        let c = i % ch;
                        gx[i] += g[i] * gv[c] * rstd[c];
                    }
                }
            }
            Op::Attention { q, k, v, weights } => {
                let (nq, d) = self.dims2(*q);
                let nk = self.dims2(*k).0;
                let dv = self.dims2(*v).1;
                let scale = 1.0 / (d as f64).sqrt();
                let (qv, kv, vv) = (&self.value(*q).data, &self.value(*k).data, &self.value(*v).data);
                {
                    let gvv = acc(grads, *v, nk * dv);
                    for a in 0..nq {
                        for b in 0..nk {
                            axpy(&mut gvv[b * dv..(b + 1) * dv], weights[a * nk + b], &g[a * dv..(a + 1) * dv]);
                        }
                    }
                }
                // dS = W * (dW - rowsum(dW * W)), dW = dOut V^T
                let mut ds = vec![0.0; nq * nk];
                for a in 0..nq {
                    let go = &g[a * dv..(a + 1) * dv];
                    let dw: Vec<f64> = (0..nk).map(|b| dot(go, &vv[b * dv..(b + 1) * dv])).collect();
                    let wrow = &weights[a * nk..(a + 1) * nk];
                    let inner: f64 = dw.iter().zip(wrow).map(|(x, y)| x * y).sum();
                    for b in 0..nk {
                        ds[a * nk + b] = wrow[b] * (dw[b] - inner) * scale;
                    }
                }
                {
                    let gq = acc(grads, *q, nq * d);
                    for a in 0..nq {
                        for b in 0..nk {
                            axpy(&mut gq[a * d..(a + 1) * d], ds[a * nk + b], &kv[b * d..(b + 1) * d]);
                        }
                    }
                }
                let gk = acc(grads, *k, nk * d);
                for a in 0..nq {
                    for b in 0..nk {
                        axpy(&mut gk[b * d..(b + 1) * d], ds[a * nk + b], &qv[a * d..(a + 1) * d]);
                    }
                }
            }
            Op::AdditiveAttention { fh, fg, w } => {
                let (n, d) = self.dims2(*fh);
                let p = self.dims2(*fg).0;
                let (hv, gfv, wv) = (&self.value(*fh).data, &self.value(*fg).data, &self.value(*w).data);
                let mut gh = vec![0.0; n * d];
                let mut gw = vec![0.0; d];
                let mut gg = vec![0.0; p * d];
                for i in 0..n {
                    let alpha = &out.data[i * p..(i + 1) * p];
                    let ga = &g[i * p..(i + 1) * p];
                    let inner: f64 = alpha.iter().zip(ga).map(|(a, b)| a * b).sum();
                    let h = &hv[i * d..(i + 1) * d];
                    let ghr = &mut gh[i * d..(i + 1) * d];
                    for px in 0..p {
                        let ds = alpha[px] * (ga[px] - inner);
                        if ds == 0.0 {
                            continue;
                        }
                        let gp = &gfv[px * d..(px + 1) * d];
                        let ggr = &mut gg[px * d..(px + 1) * d];
                        for j in 0..d {
                            let pre = h[j] + gp[j];
                            if pre > 0.0 {
                                let t = ds * wv[j];
                                ghr[j] += t;
                                ggr[j] += t;
                                gw[j] += ds * pre;
                            }
                        }
                    }
                }
                axpy(acc(grads, *fh, n * d), 1.0, &gh);
                axpy(acc(grads, *fg, p * d), 1.0, &gg);
                axpy(acc(grads, *w, d), 1.0, &gw);
            }
            Op::Conv2d { x, w, b } => {
                let xs = &self.value(*x).shape;
                let ws = &self.value(*w).shape;
                let (h, wd, cin) = (xs[0], xs[1], xs[2]);
                let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
                let (ph, pw) = (kh / 2, kw / 2);
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                {
                    let gb = acc(grads, *b, cout);
                    for px in g.chunks_exact(cout) {
                        axpy(gb, 1.0, px);
                    }
                }
                let mut gx = vec![0.0; h * wd * cin];
                let mut gw = vec![0.0; kh * kw * cin * cout];
                for r in 0..h {
                    for c in 0..wd {
                        let go = &g[(r * wd + c) * cout..][..cout];
                        for dr in 0..kh {
                            let rr = r as isize + dr as isize - ph as isize;
                            if rr < 0 || rr >= h as isize {
                                continue;
                            }
                            for dc in 0..kw {
                                let cc = c as isize + dc as isize - pw as isize;
                                if cc < 0 || cc >= wd as isize {
                                    continue;
                                }
                                let xoff = (rr as usize * wd + cc as usize) * cin;
                                let woff = (dr * kw + dc) * cin * cout;
                                for ci in 0..cin {
                                    let wk = &wv[woff + ci * cout..][..cout];
                                    gx[xoff + ci] += dot(go, wk);
                                    let a = xv[xoff + ci];
                                    if a != 0.0 {
                                        axpy(&mut gw[woff + ci * cout..][..cout], a, go);
                                    }
                                }
                            }
                        }
                    }
                }
                axpy(acc(grads, *w, gw.len()), 1.0, &gw);
                axpy(acc(grads, *x, gx.len()), 1.0, &gx);
            }
            Op::MaxPool2 { x, argmax } => {
                let len = self.value(*x).len();
                let gx = acc(grads, *x, len);
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i] += g[o];
                }
            }
            Op::Dropout { x, mask } => {
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
            Op::Upsample { x } => {
                let xs = &self.value(*x).shape;
                let (h, w, c) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (out.shape[0], out.shape[1]);
                let gx = acc(grads, *x, h * w * c);
                for r in 0..oh {
                    let (r0, r1, fr) = upsample_coord(r, h, oh);
                    for cc in 0..ow {
                        let (c0, c1, fc) = upsample_coord(cc, w, ow);
                        let go = &g[(r * ow + cc) * c..][..c];
                        axpy(&mut gx[(r0 * w + c0) * c..][..c], (1.0 - fr) * (1.0 - fc), go);
                        axpy(&mut gx[(r0 * w + c1) * c..][..c], (1.0 - fr) * fc, go);
                        axpy(&mut gx[(r1 * w + c0) * c..][..c], fr * (1.0 - fc), go);
                        axpy(&mut gx[(r1 * w + c1) * c..][..c], fr * fc, go);
                    }
                }
            }
            Op::Gather { feat, pos, geom } => {
                let fs = &self.value(*feat).shape;
                let (h, w, c) = (fs[0], fs[1], fs[2]);
                let n = self.dims2(*pos).0;
                let fv = &self.value(*feat).data;
                let pv = &self.value(*pos).data;
                let mut gp = vec![0.0; 2 * n];
                {
                    let gf = acc(grads, *feat, h * w * c);
                    for i in 0..n {
                        let (r, cc) = geom.to_pixel(Position::new(pv[2 * i], pv[2 * i + 1]));
                        let s = BilinearStencil::new(r, cc, h, w);
                        let go = &g[i * c..(i + 1) * c];
                        for (rr, ccc, wt) in s.taps() {
                            axpy(&mut gf[(rr * w + ccc) * c..][..c], wt, go);
                        }
                        let (mut dr, mut dc) = (0.0, 0.0);
                        for ch in 0..c {
                            let v = |rr: usize, ccc: usize| fv[(rr * w + ccc) * c + ch];
                            let (dvr, dvc) = s.partials(v);
                            dr += go[ch] * dvr;
                            dc += go[ch] * dvc;
                        }
                        gp[2 * i] = dc / geom.resolution;
                        gp[2 * i + 1] = -dr / geom.resolution;
                    }
                }
                axpy(acc(grads, *pos, 2 * n), 1.0, &gp);
            }
            Op::Expm(m) => {
                let mv = &self.value(*m).data;
                let gm = acc(grads, *m, mv.len());
                for i in 0..mv.len() / 4 {
                    let r = [mv[4 * i], mv[4 * i + 1], mv[4 * i + 2], mv[4 * i + 3]];
                    let up = [g[4 * i], g[4 * i + 1], g[4 * i + 2], g[4 * i + 3]];
                    let d = expm2x2_vjp(r, up);
                    for j in 0..4 {
                        gm[4 * i + j] += d[j];
                    }
                }
            }
            Op::MatVec2 { m, v } => {
                let (mv, vv) = (&self.value(*m).data, &self.value(*v).data);
                let n = vv.len() / 2;
                {
                    let gm = acc(grads, *m, 4 * n);
                    for i in 0..n {
                        let (gx, gy) = (g[2 * i], g[2 * i + 1]);
                        let (x, y) = (vv[2 * i], vv[2 * i + 1]);
                        gm[4 * i] += gx * x;
                        gm[4 * i + 1] += gx * y;
                        gm[4 * i + 2] += gy * x;
                        gm[4 * i + 3] += gy * y;
                    }
                }
                let gv = acc(grads, *v, 2 * n);
                for i in 0..n {
                    let (gx, gy) = (g[2 * i], g[2 * i + 1]);
                    gv[2 * i] += mv[4 * i] * gx + mv[4 * i + 2] * gy;
                    gv[2 * i + 1] += mv[4 * i + 1] * gx + mv[4 * i + 3] * gy;
                }
            }
            Op::LogPrior { pos, prior } => {
                let pv = &self.value(*pos).data;
                let n = pv.len() / 2;
                let gp = acc(grads, *pos, 2 * n);
                for i in 0..n {
                    let (_, d) = prior.log_p_tilde_penalized(Position::new(pv[2 * i], pv[2 * i + 1]));
                    gp[2 * i] += g[i] * d[0];
                    gp[2 * i + 1] += g[i] * d[1];
                }
            }
        }
    }
}

/// Source coordinates for output index `o` when resizing `n_in -> n_out`.
fn upsample_coord(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

/// 2x2 bilinear stencil with border clamping.
struct BilinearStencil {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
    fr: f64,
    fc: f64,
    r_free: bool,
    c_free: bool,
}

impl BilinearStencil {
    fn new(r: f64, c: f64, h: usize, w: usize) -> Self {
        let (r, r_free) = clamp_axis(r, h);
        let (c, c_free) = clamp_axis(c, w);
        let r0 = if h > 1 { (r.floor() as usize).min(h - 2) } else { 0 };
        let c0 = if w > 1 { (c.floor() as usize).min(w - 2) } else { 0 };
        BilinearStencil {
            r0,
            r1: (r0 + 1).min(h - 1),
            c0,
            c1: (c0 + 1).min(w - 1),
            fr: r - r0 as f64,
            fc: c - c0 as f64,
            r_free,
            c_free,
        }
    }

    fn taps(&self) -> [(usize, usize, f64); 4] {
        let (fr, fc) = (self.fr, self.fc);
        [
            (self.r0, self.c0, (1.0 - fr) * (1.0 - fc)),
            (self.r0, self.c1, (1.0 - fr) * fc),
            (self.r1, self.c0, fr * (1.0 - fc)),
            (self.r1, self.c1, fr * fc),
        ]
    }

    fn blend(&self, v: impl Fn(usize, usize) -> f64) -> f64 {
        self.taps().iter().map(|&(r, c, w)| w * v(r, c)).sum()
    }

    fn partials(&self, v: impl Fn(usize, usize) -> f64) -> (f64, f64) {
        let (v00, v01, v10, v11) = (v(self.r0, self.c0), v(self.r0, self.c1), v(self.r1, self.c0), v(self.r1, self.c1));
        let top = v00 + self.fc * (v01 - v00);
        let bot = v10 + self.fc * (v11 - v10);
        let dr = if self.r_free { bot - top } else { 0.0 };
        let dc = if self.c_free {
            (v01 - v00) + self.fr * ((v11 - v10) - (v01 - v00))
        } else {
            0.0
        };
        (dr, dc)
    }
}

fn acc(grads: &mut [Vec<f64>], v: Var, len: usize) -> &mut Vec<f64> {
    let g = &mut grads[v.0];
    if g.is_empty() {
        *g = vec![0.0; len];
    }
    g
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yy, &xx) in y.iter_mut().zip(x) {
        *yy += a * xx;
    }
}

/// Per-node gradients from one reverse pass.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of a node, or zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        let g = &self.grads[v.0];
        if g.is_empty() {
            vec![0.0; len]
        } else {
            g.clone()
        }
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        let g = &self.grads[v.0];
        (!g.is_empty()).then_some(g.as_slice())
    }

    /// Gradients of every parameter the graph touched, by parameter id.
    pub fn param_grads(&self, graph: &Graph) -> Vec<(ParamId, Vec<f64>)> {
        graph
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(id, v)| v.and_then(|v| self.get(v)).map(|g| (id, g.to_vec())))
            .collect()
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) {
        for (id, v) in graph.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.get(*v) {
                    axpy(store.grad_mut(id), 1.0, g);
                }
            }
        }
    }
}
