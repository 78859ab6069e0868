//! Tape of tensor operations with a reverse sweep.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Nodes are only ever appended, so the tape is
//! already in topological order and `backward` walks it from the end.

use std::collections::HashMap;

use rand::Rng;

use super::optim::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BATCHNORM_EPS: f64 = 1e-5;

/// Per-channel running statistics of an input batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.9,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Elu {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: Mode,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    Reshape {
        x: Var,
    },
    SliceTime {
        x: Var,
        t: usize,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    StackTime {
        parts: Vec<Var>,
    },
    LstmCell {
        xproj: Var,
        state: Var,
        wh: Var,
        /// Activated gates per row: input, forget, cell candidate, output.
        gates: Vec<f64>,
        tanh_c: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Weights of one LSTM layer; gate order along the `4H` axis is input,
/// forget, cell candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    /// `[n x 4H]`
    pub wx: Var,
    /// `[H x 4H]`
    pub wh: Var,
    /// `[4H]`
    pub b: Var,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(Var, String)>,
    param_index: HashMap<String, Var>,
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is wanted after `backward`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a parameter from the store, once per graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?
            .value
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.push((v, name.to_string()));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of registered parameters, by name.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Option<&[f64]>)> {
        self.params
            .iter()
            .map(move |(v, name)| (name.as_str(), self.grad(*v)))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---------------------------------------------------------------- ops

    /// Same-padded cross-correlation. `x: [B, L, Cin]`, `w: [k, Cin, Cout]`,
    /// `b: [Cout]`, `k` odd.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 {
            return Err(shape_err(format!("conv1d: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (batch, len, cin) = (xs[0], xs[1], xs[2]);
        let (k, wcin, cout) = (ws[0], ws[1], ws[2]);
        if wcin != cin || bs[0] != cout {
            return Err(shape_err(format!("conv1d: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        if k % 2 == 0 {
            return Err(shape_err(format!("conv1d: kernel width {k} must be odd")));
        }
        let pad = k / 2;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; batch * len * cout];
        for bi in 0..batch {
            for t in 0..len {
                let orow = &mut out[(bi * len + t) * cout..][..cout];
                orow.copy_from_slice(bd);
                for j in 0..k {
                    let s = t + j;
                    if s < pad || s - pad >= len {
                        continue;
                    }
                    let xrow = &xd[(bi * len + s - pad) * cin..][..cin];
                    let wj = &wd[j * cin * cout..][..cin * cout];
                    for (i, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &wj[i * cout..][..cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[x, w, b]);
        let value = Tensor::new([batch, len, cout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b }, needs))
    }

    /// Non-overlapping width-2 max pooling along time; an odd tail is dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] < 2 {
            return Err(shape_err(format!("max_pool2 needs [B, L>=2, C], got {xs:?}")));
        }
        let (batch, len, ch) = (xs[0], xs[1], xs[2]);
        let half = len / 2;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * half * ch);
        let mut argmax = Vec::with_capacity(batch * half * ch);
        for bi in 0..batch {
            for t in 0..half {
                for c in 0..ch {
                    let i0 = (bi * len + 2 * t) * ch + c;
                    let i1 = i0 + ch;
                    let (idx, v) = if xd[i1] > xd[i0] {
                        (i1, xd[i1])
                    } else {
                        (i0, xd[i0])
                    };
                    out.push(v);
                    argmax.push(idx);
                }
            }
        }
        let needs = self.needs(&[x]);
        let value = Tensor::new([batch, half, ch], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, needs))
    }

    /// Mean over time: `[B, L, C] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return Err(shape_err(format!("global_avg_pool needs [B, L>0, C], got {xs:?}")));
        }
        let (batch, len, ch) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; batch * ch];
        for bi in 0..batch {
            let orow = &mut out[bi * ch..][..ch];
            for t in 0..len {
                for (o, &v) in orow.iter_mut().zip(&xd[(bi * len + t) * ch..][..ch]) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o /= len as f64);
        }
        let needs = self.needs(&[x]);
        let value = Tensor::new([batch, ch], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, needs))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(&[x]);
        self.push(value, op, needs)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { v.exp_m1() }, Op::Elu { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh { x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, |v| v * factor, Op::Scale { x, factor })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!(
                "elementwise op on {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// `x W + b` for `x: [B, n]`, `W: [n, m]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err(format!("linear: x {xs:?}, W {ws:?}")));
        }
        let (batch, n, m) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(shape_err(format!("linear: bias {:?}, expected [{m}]", self.shape(b))));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; batch * m];
        for bi in 0..batch {
            let orow = &mut out[bi * m..][..m];
            if let Some(b) = b {
                orow.copy_from_slice(self.nodes[b.0].value.data());
            }
            for (i, &xv) in xd[bi * n..][..n].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, &wv) in orow.iter_mut().zip(&wd[i * m..][..m]) {
                    *o += xv * wv;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        let value = Tensor::new([batch, m], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// Per-channel normalization over every axis but the last. Train mode
    /// uses batch statistics and updates `stats`; eval mode uses `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ch = *xs.last().ok_or_else(|| shape_err("batch_norm on a scalar"))?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] || stats.mean.len() != ch {
            return Err(shape_err(format!("batch_norm: {ch} channels vs scale/shift shapes")));
        }
        let xd = self.value(x).data();
        let n = xd.len() / ch.max(1);
        let (mean, var) = match mode {
            Mode::Train => {
                if xs.first().copied().unwrap_or(0) < 2 {
                    return Err(shape_err("batch_norm in train mode needs a batch of at least 2"));
                }
                let mut mean = vec![0.0; ch];
                for row in xd.chunks_exact(ch) {
                    mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; ch];
                for row in xd.chunks_exact(ch) {
                    for c in 0..ch {
                        let d = row[c] - mean[c];
                        var[c] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                for c in 0..ch {
                    stats.mean[c] = stats.momentum * stats.mean[c] + (1.0 - stats.momentum) * mean[c];
                    stats.var[c] = stats.momentum * stats.var[c] + (1.0 - stats.momentum) * var[c];
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks_exact(ch) {
            for c in 0..ch {
                let h = (row[c] - mean[c]) * inv_std[c];
                xhat.push(h);
                out.push(g[c] * h + bt[c]);
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            needs,
        ))
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let src = self.value(x);
        let mask: Vec<f64> = (0..src.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, needs))
    }

    /// Row-wise softmax of `[B, K]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err(format!("softmax needs [B, K], got {xs:?}")));
        }
        let data = softmax_rows(self.value(x).data(), xs[1]);
        let value = Tensor::new(xs, data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Softmax { x }, needs))
    }

    /// Mean negative log-likelihood of `labels` under softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xs = self.shape(logits).to_vec();
        if xs.len() != 2 || xs[0] != labels.len() || xs[0] == 0 {
            return Err(shape_err(format!(
                "cross_entropy: logits {xs:?} with {} labels",
                labels.len()
            )));
        }
        let k = xs[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label {
                label: bad,
                classes: k,
            });
        }
        let ld = self.value(logits).data();
        let mut loss = 0.0;
        for (row, &y) in ld.chunks_exact(k).zip(labels) {
            loss += log_sum_exp(row) - row[y];
        }
        loss /= labels.len() as f64;
        let probs = softmax_rows(ld, k);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.is_empty() {
            return Err(shape_err(format!(
                "mse: prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.len() as f64;
        let needs = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// `[B, T, C] -> [B, C]` at time step `t`.
    pub fn slice_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || t >= xs[1] {
            return Err(shape_err(format!("slice_time({t}) on {xs:?}")));
        }
        let (batch, len, ch) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * ch);
        for bi in 0..batch {
            out.extend_from_slice(&xd[(bi * len + t) * ch..][..ch]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new([batch, ch], out)?, Op::SliceTime { x, t }, needs))
    }

    /// Columns `start..start + width` of a `[B, N]` matrix.
    pub fn narrow(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || start + width > xs[1] {
            return Err(shape_err(format!("narrow({start}, {width}) on {xs:?}")));
        }
        let n = xs[1];
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(n)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new([xs[0], width], out)?, Op::Narrow { x, start }, needs))
    }

    /// Stacks `T` matrices `[B, C]` into `[B, T, C]`.
    pub fn stack_time(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("stack_time of nothing"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 2 || parts.iter().any(|p| self.shape(*p) != s0.as_slice()) {
            return Err(shape_err("stack_time parts must share a [B, C] shape"));
        }
        let (batch, ch, len) = (s0[0], s0[1], parts.len());
        let mut out = vec![0.0; batch * len * ch];
        for (t, p) in parts.iter().enumerate() {
            for (bi, row) in self.value(*p).data().chunks_exact(ch).enumerate() {
                out[(bi * len + t) * ch..][..ch].copy_from_slice(row);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new([batch, len, ch], out)?,
            Op::StackTime {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// One LSTM step on a packed state `[B, 2H]` holding `h` then `c`.
    pub fn lstm_step(&mut self, x_t: Var, state: Var, weights: &LstmWeights) -> Result<Var> {
        let xproj = self.linear(x_t, weights.wx, Some(weights.b))?;
        self.lstm_cell(xproj, state, weights.wh)
    }

    /// The recurrent part of an LSTM step, given the input projection
    /// `x W_x + b` of shape `[B, 4H]`.
    pub fn lstm_cell(&mut self, xproj: Var, state: Var, wh: Var) -> Result<Var> {
        let (ps, ss, ws) = (
            self.shape(xproj).to_vec(),
            self.shape(state).to_vec(),
            self.shape(wh).to_vec(),
        );
        if ss.len() != 2 || ss[1] % 2 != 0 {
            return Err(shape_err(format!("lstm state {ss:?} is not [B, 2H]")));
        }
        let (batch, hidden) = (ss[0], ss[1] / 2);
        if ps != [batch, 4 * hidden] || ws != [hidden, 4 * hidden] {
            return Err(shape_err(format!(
                "lstm: projection {ps:?}, recurrent weights {ws:?}, hidden {hidden}"
            )));
        }
        let h4 = 4 * hidden;
        let pd = self.value(xproj).data();
        let sd = self.value(state).data();
        let wd = self.value(wh).data();
        let mut gates = pd.to_vec();
        for bi in 0..batch {
            let grow = &mut gates[bi * h4..][..h4];
            for (i, &hv) in sd[bi * 2 * hidden..][..hidden].iter().enumerate() {
                if hv == 0.0 {
                    continue;
                }
                for (g, &w) in grow.iter_mut().zip(&wd[i * h4..][..h4]) {
                    *g += hv * w;
                }
            }
            for (j, g) in grow.iter_mut().enumerate() {
                *g = if (2 * hidden..3 * hidden).contains(&j) {
                    g.tanh()
                } else {
                    sigmoid(*g)
                };
            }
        }
        let mut out = vec![0.0; batch * 2 * hidden];
        let mut tanh_c = vec![0.0; batch * hidden];
        for bi in 0..batch {
            let g = &gates[bi * h4..][..h4];
            let c_prev = &sd[bi * 2 * hidden + hidden..][..hidden];
            for u in 0..hidden {
                let (i, f, cand, o) = (g[u], g[hidden + u], g[2 * hidden + u], g[3 * hidden + u]);
                let c = f * c_prev[u] + i * cand;
                let tc = c.tanh();
                tanh_c[bi * hidden + u] = tc;
                out[bi * 2 * hidden + u] = o * tc;
                out[bi * 2 * hidden + hidden + u] = c;
            }
        }
        let needs = self.needs(&[xproj, state, wh]);
        Ok(self.push(
            Tensor::new([batch, 2 * hidden], out)?,
            Op::LstmCell {
                xproj,
                state,
                wh,
                gates,
                tanh_c,
            },
            needs,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(shape_err("backward needs a scalar output; use backward_with"));
        }
        self.backward_with(output, vec![1.0])
    }

    /// Reverse sweep seeded with an explicit output gradient.
    pub fn backward_with(&mut self, output: Var, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.value(output).len() {
            return Err(shape_err("seed gradient does not match output"));
        }
        let Graph { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            backprop_node(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - m).exp()));
        let s: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Gradient buffer of `v`, created zeroed on first use; `None` when the
/// node does not need a gradient.
fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Conv1d { x, w, b } => {
            let xs = nodes[x.0].value.shape();
            let (batch, len, cin) = (xs[0], xs[1], xs[2]);
            let ws = nodes[w.0].value.shape();
            let (k, cout) = (ws[0], ws[2]);
            let pad = k / 2;
            let xd = nodes[x.0].value.data();
            let wd = nodes[w.0].value.data();
            if let Some(db) = slot(nodes, grads, *b) {
                for row in g.chunks_exact(cout) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
            }
            if let Some(dw) = slot(nodes, grads, *w) {
                for bi in 0..batch {
                    for t in 0..len {
                        let grow = &g[(bi * len + t) * cout..][..cout];
                        for j in 0..k {
                            let s = t + j;
                            if s < pad || s - pad >= len {
                                continue;
                            }
                            let xrow = &xd[(bi * len + s - pad) * cin..][..cin];
                            let dwj = &mut dw[j * cin * cout..][..cin * cout];
                            for (ii, &xv) in xrow.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                for (d, &gv) in dwj[ii * cout..][..cout].iter_mut().zip(grow) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                for bi in 0..batch {
                    for t in 0..len {
                        let grow = &g[(bi * len + t) * cout..][..cout];
                        for j in 0..k {
                            let s = t + j;
                            if s < pad || s - pad >= len {
                                continue;
                            }
                            let dxrow = &mut dx[(bi * len + s - pad) * cin..][..cin];
                            let wj = &wd[j * cin * cout..][..cin * cout];
                            for (ii, d) in dxrow.iter_mut().enumerate() {
                                *d += wj[ii * cout..][..cout]
                                    .iter()
                                    .zip(grow)
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx] += gv;
                }
            }
        }
        Op::GlobalAvgPool { x } => {
            let xs = nodes[x.0].value.shape();
            let (len, ch) = (xs[1], xs[2]);
            if let Some(dx) = slot(nodes, grads, *x) {
                for (row_idx, drow) in dx.chunks_exact_mut(ch).enumerate() {
                    let bi = row_idx / len;
                    for (d, &gv) in drow.iter_mut().zip(&g[bi * ch..][..ch]) {
                        *d += gv / len as f64;
                    }
                }
            }
        }
        Op::Elu { x } => {
            let xd = nodes[x.0].value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &gv), (&xv, &yv)) in dx.iter_mut().zip(g).zip(xd.iter().zip(out)) {
                    *d += if xv > 0.0 { gv } else { gv * (yv + 1.0) };
                }
            }
        }
        Op::Relu { x } => {
            let xd = nodes[x.0].value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Op::Sigmoid { x } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out) {
                    *d += gv * y * (1.0 - y);
                }
            }
        }
        Op::Tanh { x } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out) {
                    *d += gv * (1.0 - y * y);
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * factor);
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                if let Some(d) = slot(nodes, grads, *v) {
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
        }
        Op::Mul { a, b } => {
            let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(bd) {
                    *d += gv * bv;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, &gv), &av) in db.iter_mut().zip(g).zip(ad) {
                    *d += gv * av;
                }
            }
        }
        Op::Linear { x, w, b } => {
            let xs = nodes[x.0].value.shape();
            let (batch, n) = (xs[0], xs[1]);
            let m = nodes[w.0].value.shape()[1];
            let xd = nodes[x.0].value.data();
            let wd = nodes[w.0].value.data();
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    for row in g.chunks_exact(m) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            if let Some(dw) = slot(nodes, grads, *w) {
                for bi in 0..batch {
                    let grow = &g[bi * m..][..m];
                    for (ii, &xv) in xd[bi * n..][..n].iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for (d, &gv) in dw[ii * m..][..m].iter_mut().zip(grow) {
                            *d += xv * gv;
                        }
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                for bi in 0..batch {
                    let grow = &g[bi * m..][..m];
                    for (ii, d) in dx[bi * n..][..n].iter_mut().enumerate() {
                        *d += wd[ii * m..][..m].iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            mode,
        } => {
            let ch = inv_std.len();
            let n = (xhat.len() / ch) as f64;
            let gd = nodes[gamma.0].value.data().to_vec();
            let mut sum_g = vec![0.0; ch];
            let mut sum_gx = vec![0.0; ch];
            for (grow, hrow) in g.chunks_exact(ch).zip(xhat.chunks_exact(ch)) {
                for c in 0..ch {
                    sum_g[c] += grow[c];
                    sum_gx[c] += grow[c] * hrow[c];
                }
            }
            if let Some(dbeta) = slot(nodes, grads, *beta) {
                dbeta.iter_mut().zip(&sum_g).for_each(|(d, v)| *d += v);
            }
            if let Some(dgamma) = slot(nodes, grads, *gamma) {
                dgamma.iter_mut().zip(&sum_gx).for_each(|(d, v)| *d += v);
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((drow, grow), hrow) in dx
                    .chunks_exact_mut(ch)
                    .zip(g.chunks_exact(ch))
                    .zip(xhat.chunks_exact(ch))
                {
                    for c in 0..ch {
                        drow[c] += match mode {
                            Mode::Eval => grow[c] * gd[c] * inv_std[c],
                            Mode::Train => {
                                gd[c] * inv_std[c] / n
                                    * (n * grow[c] - sum_g[c] - hrow[c] * sum_gx[c])
                            }
                        };
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }
        }
        Op::Softmax { x } => {
            let k = node.value.shape()[1];
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((drow, grow), yrow) in dx
                    .chunks_exact_mut(k)
                    .zip(g.chunks_exact(k))
                    .zip(out.chunks_exact(k))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let k = nodes[logits.0].value.shape()[1];
            let scale = g[0] / labels.len() as f64;
            if let Some(dl) = slot(nodes, grads, *logits) {
                for (r, (drow, prow)) in dl.chunks_exact_mut(k).zip(probs.chunks_exact(k)).enumerate() {
                    for j in 0..k {
                        let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                        drow[j] += scale * (prow[j] - onehot);
                    }
                }
            }
        }
        Op::Mse { pred, target } => {
            let pd = nodes[pred.0].value.data();
            let scale = 2.0 * g[0] / pd.len() as f64;
            if let Some(dp) = slot(nodes, grads, *pred) {
                for ((d, &p), &t) in dp.iter_mut().zip(pd).zip(target) {
                    *d += scale * (p - t);
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
        }
        Op::SliceTime { x, t } => {
            let xs = nodes[x.0].value.shape();
            let (len, ch) = (xs[1], xs[2]);
            if let Some(dx) = slot(nodes, grads, *x) {
                for (bi, grow) in g.chunks_exact(ch).enumerate() {
                    for (d, &v) in dx[(bi * len + t) * ch..][..ch].iter_mut().zip(grow) {
                        *d += v;
                    }
                }
            }
        }
        Op::Narrow { x, start } => {
            let n = nodes[x.0].value.shape()[1];
            let width = node.value.shape()[1];
            if let Some(dx) = slot(nodes, grads, *x) {
                for (drow, grow) in dx.chunks_exact_mut(n).zip(g.chunks_exact(width)) {
                    for (d, &v) in drow[*start..start + width].iter_mut().zip(grow) {
                        *d += v;
                    }
                }
            }
        }
        Op::StackTime { parts } => {
            let s = node.value.shape();
            let (len, ch) = (s[1], s[2]);
            for (t, p) in parts.iter().enumerate() {
                if let Some(dp) = slot(nodes, grads, *p) {
                    for (bi, drow) in dp.chunks_exact_mut(ch).enumerate() {
                        for (d, &v) in drow.iter_mut().zip(&g[(bi * len + t) * ch..][..ch]) {
                            *d += v;
                        }
                    }
                }
            }
        }
        Op::LstmCell {
            xproj,
            state,
            wh,
            gates,
            tanh_c,
        } => {
            let s = nodes[state.0].value.shape();
            let (batch, hidden) = (s[0], s[1] / 2);
            let h4 = 4 * hidden;
            let sd = nodes[state.0].value.data();
            let wd = nodes[wh.0].value.data();
            let mut dpre = vec![0.0; batch * h4];
            let mut dc_prev = vec![0.0; batch * hidden];
            for bi in 0..batch {
                let gt = &gates[bi * h4..][..h4];
                let grow = &g[bi * 2 * hidden..][..2 * hidden];
                let c_prev = &sd[bi * 2 * hidden + hidden..][..hidden];
                let dp = &mut dpre[bi * h4..][..h4];
                for u in 0..hidden {
                    let (ig, fg, cand, og) = (gt[u], gt[hidden + u], gt[2 * hidden + u], gt[3 * hidden + u]);
                    let tc = tanh_c[bi * hidden + u];
                    let dh = grow[u];
                    let dc = grow[hidden + u] + dh * og * (1.0 - tc * tc);
                    dp[u] = dc * cand * ig * (1.0 - ig);
                    dp[hidden + u] = dc * c_prev[u] * fg * (1.0 - fg);
                    dp[2 * hidden + u] = dc * ig * (1.0 - cand * cand);
                    dp[3 * hidden + u] = dh * tc * og * (1.0 - og);
                    dc_prev[bi * hidden + u] = dc * fg;
                }
            }
            if let Some(dx) = slot(nodes, grads, *xproj) {
                dx.iter_mut().zip(&dpre).for_each(|(d, v)| *d += v);
            }
            if let Some(dw) = slot(nodes, grads, *wh) {
                for bi in 0..batch {
                    let dp = &dpre[bi * h4..][..h4];
                    for (ii, &hv) in sd[bi * 2 * hidden..][..hidden].iter().enumerate() {
                        if hv == 0.0 {
                            continue;
                        }
                        for (d, &v) in dw[ii * h4..][..h4].iter_mut().zip(dp) {
                            *d += hv * v;
                        }
                    }
                }
            }
            if let Some(ds) = slot(nodes, grads, *state) {
                for bi in 0..batch {
                    let dp = &dpre[bi * h4..][..h4];
                    for u in 0..hidden {
                        ds[bi * 2 * hidden + u] +=
                            wd[u * h4..][..h4].iter().zip(dp).map(|(a, b)| a * b).sum::<f64>();
                        ds[bi * 2 * hidden + hidden + u] += dc_prev[bi * hidden + u];
                    }
                }
            }
        }
    }
}
