//! Per-channel, per-timestep relevance maps for single-model decisions.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, Tensor, Var, BATCHNORM_EPS};
use crate::error::{Error, Result};
use crate::models::{Layer, Sequential, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttributionMethod {
    GradXInput,
    IntegratedGradients,
    EpsilonLrp,
}

impl fmt::Display for AttributionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttributionMethod::GradXInput => "grad_x_input",
            AttributionMethod::IntegratedGradients => "integrated_gradients",
            AttributionMethod::EpsilonLrp => "epsilon_lrp",
        })
    }
}

impl FromStr for AttributionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "grad_x_input" | "gradxinput" => Ok(AttributionMethod::GradXInput),
            "integrated_gradients" | "ig" => Ok(AttributionMethod::IntegratedGradients),
            "epsilon_lrp" | "lrp" => Ok(AttributionMethod::EpsilonLrp),
            _ => Err(Error::Config(format!("unknown attribution method {s:?}"))),
        }
    }
}

/// Signed relevance of every input sample, `[L x C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub scores: Tensor,
    pub target_class: usize,
    pub method: AttributionMethod,
    /// Factor the raw scores were multiplied by; 1 until normalized.
    pub normalization: f64,
}

impl AttributionMap {
    pub fn len(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn sum(&self) -> f64 {
        self.scores.data().iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.scores.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IgConfig {
    pub steps: usize,
}

impl Default for IgConfig {
    fn default() -> Self {
        IgConfig { steps: 256 }
    }
}

/// A network whose pre-softmax scores can be recorded on a graph.
pub trait Differentiable {
    /// `(L, C)` of one input window.
    fn input_shape(&self) -> (usize, usize);
    /// Records `[B x K]` scores of `x: [B x L x C]` in eval mode.
    fn scores(&self, g: &mut Graph, x: Var) -> Result<Var>;
}

impl Differentiable for TrainedModel {
    fn input_shape(&self) -> (usize, usize) {
        (self.spec.input_length, self.spec.channels)
    }

    fn scores(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut norm = self.input_norm.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(g, x, Mode::Eval, &mut norm, &mut rng)?.logits)
    }
}

impl Differentiable for Sequential {
    fn input_shape(&self) -> (usize, usize) {
        (self.input_length, self.channels)
    }

    fn scores(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_graph(g, x)
    }
}

fn check_window<M: Differentiable + ?Sized>(model: &M, window: &Tensor) -> Result<(usize, usize)> {
    let (l, c) = model.input_shape();
    if window.shape() != [l, c] {
        return Err(Error::Shape(format!("window {:?}, model expects [{l}, {c}]", window.shape())));
    }
    Ok((l, c))
}

/// Gradients of the target score for every row of `batch: [B x L x C]`,
/// and the scores themselves.
fn batch_gradients<M: Differentiable + ?Sized>(model: &M, batch: Tensor, target: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = batch.shape()[0];
    let mut g = Graph::new();
    let x = g.input(batch);
    let s = model.scores(&mut g, x)?;
    let k = g.shape(s)[1];
    if target >= k {
        return Err(Error::Label { label: target, classes: k });
    }
    let scores: Vec<f64> = g.value(s).data().chunks_exact(k).map(|r| r[target]).collect();
    let mut seed = vec![0.0; rows * k];
    for r in 0..rows {
        seed[r * k + target] = 1.0;
    }
    g.backward_with(s, seed)?;
    let grad = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; g.value(x).len()]);
    Ok((grad, scores))
}

/// Pre-softmax score of `target` for one window.
pub fn target_score<M: Differentiable + ?Sized>(model: &M, window: &Tensor, target: usize) -> Result<f64> {
    let (l, c) = check_window(model, window)?;
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([1, l, c], window.data().to_vec())?);
    let s = model.scores(&mut g, x)?;
    let k = g.shape(s)[1];
    if target >= k {
        return Err(Error::Label { label: target, classes: k });
    }
    Ok(g.value(s).data()[target])
}

/// `(d score_target / d x) * x` on the pre-softmax score.
pub fn grad_x_input<M: Differentiable + ?Sized>(model: &M, window: &Tensor, target: usize) -> Result<AttributionMap> {
    let (l, c) = check_window(model, window)?;
    let (grad, _) = batch_gradients(model, Tensor::new([1, l, c], window.data().to_vec())?, target)?;
    let scores = grad.iter().zip(window.data()).map(|(g, x)| g * x).collect();
    Ok(AttributionMap {
        scores: Tensor::new([l, c], scores)?,
        target_class: target,
        method: AttributionMethod::GradXInput,
        normalization: 1.0,
    })
}

/// Midpoint Riemann sum of the path integral from the zero window.
pub fn integrated_gradients<M: Differentiable + ?Sized>(
    model: &M,
    window: &Tensor,
    target: usize,
    cfg: &IgConfig,
) -> Result<AttributionMap> {
    if cfg.steps < 2 {
        return Err(Error::Config(format!("integrated gradients needs at least 2 steps, got {}", cfg.steps)));
    }
    let (l, c) = check_window(model, window)?;
    let per = l * c;
    let mut total = vec![0.0; per];
    const CHUNK: usize = 32;
    for start in (0..cfg.steps).step_by(CHUNK) {
        let n = CHUNK.min(cfg.steps - start);
        let mut data = Vec::with_capacity(n * per);
        for s in start..start + n {
            let alpha = (s as f64 + 0.5) / cfg.steps as f64;
            data.extend(window.data().iter().map(|v| alpha * v));
        }
        let (grad, _) = batch_gradients(model, Tensor::new([n, l, c], data)?, target)?;
        for row in grad.chunks_exact(per) {
            total.iter_mut().zip(row).for_each(|(t, g)| *t += g);
        }
    }
    let scores = total
        .iter()
        .zip(window.data())
        .map(|(g, x)| g / cfg.steps as f64 * x)
        .collect();
    Ok(AttributionMap {
        scores: Tensor::new([l, c], scores)?,
        target_class: target,
        method: AttributionMethod::IntegratedGradients,
        normalization: 1.0,
    })
}

pub const LRP_EPSILON: f64 = 1e-6;

/// `r / (z + eps * sign(z))`, zero when the denominator vanishes (only
/// possible with `eps = 0`).
fn ratio(r: f64, z: f64, eps: f64) -> f64 {
    let d = if z >= 0.0 { z + eps } else { z - eps };
    if d == 0.0 {
        0.0
    } else {
        r / d
    }
}

/// Activations of one `[L x C]` (or flat `[N]`) sample through the layers.
#[derive(Debug, Clone)]
struct Act {
    data: Vec<f64>,
    len: usize,
    ch: usize,
}

fn forward_layer(layer: &Layer, a: &Act) -> Result<Act> {
    let (len, ch) = (a.len, a.ch);
    Ok(match layer {
        Layer::BatchNorm { gamma, beta, mean, var } => {
            if gamma.len() != ch {
                return Err(Error::Shape("normalization width does not match input".into()));
            }
            let data = a
                .data
                .chunks_exact(ch)
                .flat_map(|row| {
                    (0..ch).map(move |c| gamma[c] * (row[c] - mean[c]) / (var[c] + BATCHNORM_EPS).sqrt() + beta[c])
                })
                .collect();
            Act { data, len, ch }
        }
        Layer::Conv1d { w, b } => {
            let (k, cin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            if cin != ch {
                return Err(Error::Shape(format!("conv expects {cin} channels, got {ch}")));
            }
            let pad = k / 2;
            let wd = w.data();
            let mut out = Vec::with_capacity(len * cout);
            for t in 0..len {
                let mut row = b.data().to_vec();
                for j in 0..k {
                    let s = t + j;
                    if s < pad || s - pad >= len {
                        continue;
                    }
                    for i in 0..cin {
                        let x = a.data[(s - pad) * cin + i];
                        let wr = &wd[(j * cin + i) * cout..][..cout];
                        row.iter_mut().zip(wr).for_each(|(o, w)| *o += x * w);
                    }
                }
                out.extend(row);
            }
            Act { data: out, len, ch: cout }
        }
        Layer::Elu => Act {
            data: a.data.iter().map(|&v| if v > 0.0 { v } else { v.exp_m1() }).collect(),
            len,
            ch,
        },
        Layer::Relu => Act {
            data: a.data.iter().map(|&v| v.max(0.0)).collect(),
            len,
            ch,
        },
        Layer::MaxPool2 => {
            let half = len / 2;
            let mut out = Vec::with_capacity(half * ch);
            for t in 0..half {
                for c in 0..ch {
                    let (x0, x1) = (a.data[2 * t * ch + c], a.data[(2 * t + 1) * ch + c]);
                    out.push(if x1 > x0 { x1 } else { x0 });
                }
            }
            Act { data: out, len: half, ch }
        }
        Layer::GlobalAvgPool => {
            let mut out = vec![0.0; ch];
            for row in a.data.chunks_exact(ch) {
                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= len as f64);
            Act { data: out, len: 1, ch }
        }
        Layer::Flatten => Act {
            data: a.data.clone(),
            len: 1,
            ch: len * ch,
        },
        Layer::Dense { w, b } => {
            let (n, m) = (w.shape()[0], w.shape()[1]);
            if len != 1 || ch != n {
                return Err(Error::Shape(format!("dense layer expects {n} features, got {len}x{ch}")));
            }
            let mut out = b.data().to_vec();
            for (i, &x) in a.data.iter().enumerate() {
                out.iter_mut().zip(&w.data()[i * m..][..m]).for_each(|(o, w)| *o += x * w);
            }
            Act { data: out, len: 1, ch: m }
        }
    })
}

/// Moves relevance `r` at a layer's output to its input `a` by the ε-rule;
/// activations pass relevance through unchanged and max-pooling routes it
/// to the winning sample.
fn relevance_layer(layer: &Layer, a: &Act, z: &Act, r: &[f64], eps: f64) -> Vec<f64> {
    let (len, ch) = (a.len, a.ch);
    match layer {
        Layer::Elu | Layer::Relu | Layer::Flatten => r.to_vec(),
        Layer::BatchNorm { gamma, var, .. } => a
            .data
            .iter()
            .enumerate()
            .map(|(idx, &x)| {
                let c = idx % ch;
                let w = gamma[c] / (var[c] + BATCHNORM_EPS).sqrt();
                x * w * ratio(r[idx], z.data[idx], eps)
            })
            .collect(),
        Layer::Conv1d { w, .. } => {
            let (k, cin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let pad = k / 2;
            let wd = w.data();
            let scaled: Vec<f64> = r.iter().zip(&z.data).map(|(r, z)| ratio(*r, *z, eps)).collect();
            let mut out = vec![0.0; len * cin];
            for t in 0..len {
                let rr = &scaled[t * cout..][..cout];
                for j in 0..k {
                    let s = t + j;
                    if s < pad || s - pad >= len {
                        continue;
                    }
                    for i in 0..cin {
                        let wr = &wd[(j * cin + i) * cout..][..cout];
                        let acc: f64 = wr.iter().zip(rr).map(|(w, q)| w * q).sum();
                        out[(s - pad) * cin + i] += acc;
                    }
                }
            }
            out.iter_mut().zip(&a.data).for_each(|(o, x)| *o *= x);
            out
        }
        Layer::MaxPool2 => {
            let mut out = vec![0.0; len * ch];
            for t in 0..len / 2 {
                for c in 0..ch {
                    let (i0, i1) = (2 * t * ch + c, (2 * t + 1) * ch + c);
                    let win = if a.data[i1] > a.data[i0] { i1 } else { i0 };
                    out[win] = r[t * ch + c];
                }
            }
            out
        }
        Layer::GlobalAvgPool => {
            let mut out = vec![0.0; len * ch];
            for t in 0..len {
                for c in 0..ch {
                    let x = a.data[t * ch + c];
                    out[t * ch + c] = x / len as f64 * ratio(r[c], z.data[c], eps);
                }
            }
            out
        }
        Layer::Dense { w, .. } => {
            let m = w.shape()[1];
            let scaled: Vec<f64> = r.iter().zip(&z.data).map(|(r, z)| ratio(*r, *z, eps)).collect();
            a.data
                .iter()
                .enumerate()
                .map(|(i, &x)| x * w.data()[i * m..][..m].iter().zip(&scaled).map(|(w, q)| w * q).sum::<f64>())
                .collect()
        }
    }
}

/// Layer-wise relevance propagation with ε-stabilized denominators, from
/// the target's pre-softmax score down to the input.
pub fn epsilon_lrp(net: &Sequential, window: &Tensor, target: usize, eps: f64) -> Result<AttributionMap> {
    let (l, c) = check_window(net, window)?;
    let mut acts = vec![Act {
        data: window.data().to_vec(),
        len: l,
        ch: c,
    }];
    for layer in &net.layers {
        let next = forward_layer(layer, acts.last().expect("input"))?;
        acts.push(next);
    }
    let out = acts.last().expect("output");
    if out.len != 1 {
        return Err(Error::UnsupportedLayer("network does not end in a score vector".into()));
    }
    if target >= out.ch {
        return Err(Error::Label {
            label: target,
            classes: out.ch,
        });
    }
    let mut r = vec![0.0; out.ch];
    r[target] = out.data[target];
    for (i, layer) in net.layers.iter().enumerate().rev() {
        r = relevance_layer(layer, &acts[i], &acts[i + 1], &r, eps);
    }
    Ok(AttributionMap {
        scores: Tensor::new([l, c], r)?,
        target_class: target,
        method: AttributionMethod::EpsilonLrp,
        normalization: 1.0,
    })
}

/// Any of the three methods on a trained model. Relevance propagation is
/// only available for plain layer chains.
pub fn attribute(
    model: &TrainedModel,
    window: &Tensor,
    target: usize,
    method: AttributionMethod,
    ig: &IgConfig,
) -> Result<AttributionMap> {
    match method {
        AttributionMethod::GradXInput => grad_x_input(model, window, target),
        AttributionMethod::IntegratedGradients => integrated_gradients(model, window, target, ig),
        AttributionMethod::EpsilonLrp => epsilon_lrp(&model.as_sequential()?, window, target, LRP_EPSILON),
    }
}

/// Divides every channel by the single global maximum of `|score|`.
pub fn normalize_channels(map: &AttributionMap) -> AttributionMap {
    let m = map.max_abs();
    if m == 0.0 {
        return map.clone();
    }
    let data = map.scores.data().iter().map(|v| v / m).collect();
    AttributionMap {
        scores: Tensor::new(map.scores.shape().to_vec(), data).expect("same shape"),
        normalization: map.normalization / m,
        ..map.clone()
    }
}

/// Spearman rank correlation of two equally long score vectors.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let rank = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                out[k] = rank;
            }
            i = j + 1;
        }
        out
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

// ------------------------------------------------------------- figures

/// Diverging palette: -1 is pure blue, 0 white, +1 pure red.
pub fn palette(score: f64) -> String {
    let s = score.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
    let (r, g, b) = if s >= 0.0 {
        (255, fade(s), fade(s))
    } else {
        (fade(s), fade(s), 255)
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

const PANEL_W: f64 = 960.0;
const PANEL_H: f64 = 90.0;
const MARGIN_L: f64 = 60.0;

/// SVG text of one panel per channel of `window: [L x C]`. Channels whose
/// name appears in `map_leads` get the attribution background; the others
/// are drawn on white.
pub fn render_svg(window: &Tensor, lead_names: &[String], map: &AttributionMap, map_leads: &[String]) -> Result<String> {
    let s = window.shape();
    if s.len() != 2 || s[1] != lead_names.len() {
        return Err(Error::Shape("one lead name per window channel".into()));
    }
    if map.len() != s[0] || map.channels() != map_leads.len() {
        return Err(Error::Shape(format!(
            "map {:?} does not fit window {:?} with {} mapped leads",
            map.scores.shape(),
            s,
            map_leads.len()
        )));
    }
    let (len, ch) = (s[0], s[1]);
    let norm = normalize_channels(map);
    let step = PANEL_W / len as f64;
    let height = PANEL_H * ch as f64 + 30.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{height}" viewBox="0 0 {w} {height}">"#,
        w = PANEL_W + MARGIN_L + 10.0
    );
    for c in 0..ch {
        let y0 = PANEL_H * c as f64;
        let _ = writeln!(svg, r#"<g class="panel" data-lead="{}">"#, escape(&lead_names[c]));
        let mapped = map_leads.iter().position(|m| m == &lead_names[c]);
        match mapped {
            Some(mc) => {
                for t in 0..len {
                    let v = norm.scores.data()[t * map.channels() + mc];
                    let _ = writeln!(
                        svg,
                        r#"<rect x="{:.3}" y="{y0:.3}" width="{:.3}" height="{PANEL_H:.3}" fill="{}" data-t="{t}"/>"#,
                        MARGIN_L + step * t as f64,
                        step,
                        palette(v)
                    );
                }
            }
            None => {
                let _ = writeln!(
                    svg,
                    r##"<rect x="{MARGIN_L:.3}" y="{y0:.3}" width="{PANEL_W:.3}" height="{PANEL_H:.3}" fill="none" stroke="#cccccc"/>"##
                );
            }
        }
        let col: Vec<f64> = (0..len).map(|t| window.data()[t * ch + c]).collect();
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let points: Vec<String> = col
            .iter()
            .enumerate()
            .map(|(t, v)| {
                let x = MARGIN_L + step * (t as f64 + 0.5);
                let y = y0 + PANEL_H - 8.0 - (v - lo) / span * (PANEL_H - 16.0);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="4" y="{:.2}" font-family="sans-serif" font-size="14">{}</text>"#,
            y0 + PANEL_H / 2.0,
            escape(&lead_names[c])
        );
        svg.push_str("</g>\n");
    }
    let axis_y = PANEL_H * ch as f64 + 20.0;
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN_L}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        axis_y - 12.0,
        MARGIN_L + PANEL_W,
        axis_y - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{axis_y:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">time</text>"#,
        MARGIN_L + PANEL_W / 2.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_figure(
    window: &Tensor,
    lead_names: &[String],
    map: &AttributionMap,
    map_leads: &[String],
    out_path: &Path,
) -> Result<()> {
    let svg = render_svg(window, lead_names, map, map_leads)?;
    if let Some(dir) = out_path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(out_path, svg)?;
    Ok(())
}

/// Raw scores as `time,channel,score` rows.
pub fn scores_csv(map: &AttributionMap, lead_names: &[String]) -> Result<String> {
    if lead_names.len() != map.channels() {
        return Err(Error::Shape("one lead name per map channel".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["time", "channel", "score"])?;
    for t in 0..map.len() {
        for (c, name) in lead_names.iter().enumerate() {
            w.write_record([
                t.to_string(),
                name.clone(),
                format!("{:e}", map.scores.data()[t * map.channels() + c]),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
