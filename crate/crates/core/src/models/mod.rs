//! The four classifier families: fully convolutional, residual, and LSTM
//! with either a final-output head or an additional next-step prediction
//! head. All share an input batch normalization and a dense softmax head.

mod sequential;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use sequential::{Layer, Sequential};

use crate::autodiff::checkpoint::{read_checkpoint, write_checkpoint};
use crate::autodiff::{
    he_init, softmax_rows, BatchNormStats, Graph, Mode, ParamStore, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::windowing::{input_length, InputDomain, WindowBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Fcn,
    Resnet,
    LstmFinal,
    LstmJoint,
}

impl ModelKind {
    pub fn is_lstm(self) -> bool {
        matches!(self, ModelKind::LstmFinal | ModelKind::LstmJoint)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Fcn => "fcn",
            ModelKind::Resnet => "resnet",
            ModelKind::LstmFinal => "lstm",
            ModelKind::LstmJoint => "lstm-joint",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fcn" => Ok(ModelKind::Fcn),
            "resnet" => Ok(ModelKind::Resnet),
            "lstm" | "lstm_final" => Ok(ModelKind::LstmFinal),
            "lstm-joint" | "lstm_joint" => Ok(ModelKind::LstmJoint),
            _ => Err(Error::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

/// Declarative description of a network. Defaults follow the reference
/// setup; every size is overridable.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_domain: InputDomain,
    pub input_length: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Filters of every convolution (constant across layers).
    pub filters: usize,
    /// Kernel widths of the fully convolutional blocks.
    pub fcn_kernels: Vec<usize>,
    pub resnet_blocks: usize,
    pub resnet_kernel: usize,
    pub stem_kernel: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, input_domain: InputDomain, channels: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind,
            input_domain,
            input_length: input_length(192, input_domain),
            channels,
            num_classes,
            filters: 128,
            fcn_kernels: vec![7, 5, 5, 3],
            resnet_blocks: 3,
            resnet_kernel: 5,
            stem_kernel: 7,
            hidden: 256,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.input_length < 2 {
            return bad(format!("input {}x{} is empty", self.input_length, self.channels));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.kind {
            ModelKind::Fcn => {
                if self.filters == 0 || self.fcn_kernels.is_empty() {
                    return bad("fcn needs filters and at least one block".into());
                }
                if let Some(k) = self.fcn_kernels.iter().find(|k| *k % 2 == 0) {
                    return bad(format!("kernel width {k} is not odd"));
                }
                if self.input_length >> self.fcn_kernels.len() == 0 {
                    return bad(format!(
                        "{} pooling stages leave nothing of length {}",
                        self.fcn_kernels.len(),
                        self.input_length
                    ));
                }
            }
            ModelKind::Resnet => {
                if self.filters == 0 || self.resnet_blocks == 0 {
                    return bad("resnet needs filters and at least one block".into());
                }
                if self.resnet_kernel.is_multiple_of(2) || self.stem_kernel.is_multiple_of(2) {
                    return bad("resnet kernel widths must be odd".into());
                }
                if self.input_length >> (self.resnet_blocks - 1) == 0 {
                    return bad("too many downsampling blocks for the input length".into());
                }
            }
            ModelKind::LstmFinal | ModelKind::LstmJoint => {
                if self.hidden == 0 {
                    return bad("lstm needs hidden units".into());
                }
            }
        }
        Ok(())
    }

    /// Length after the convolutional stack, before global pooling.
    pub fn feature_lengths(&self) -> Vec<usize> {
        match self.kind {
            ModelKind::Fcn => {
                let mut len = self.input_length;
                self.fcn_kernels
                    .iter()
                    .map(|_| {
                        len /= 2;
                        len
                    })
                    .collect()
            }
            ModelKind::Resnet => {
                let mut len = self.input_length;
                (0..self.resnet_blocks)
                    .map(|i| {
                        if i > 0 {
                            len /= 2;
                        }
                        len
                    })
                    .collect()
            }
            _ => vec![self.input_length],
        }
    }

    /// `key = value` lines, the sidecar of a checkpoint.
    pub fn to_manifest(&self) -> String {
        let kernels: Vec<String> = self.fcn_kernels.iter().map(usize::to_string).collect();
        format!(
            "kind = {}\ninput_domain = {}\ninput_length = {}\nchannels = {}\nnum_classes = {}\n\
             filters = {}\nfcn_kernels = {}\nresnet_blocks = {}\nresnet_kernel = {}\n\
             stem_kernel = {}\nhidden = {}\ndropout = {}\n",
            self.kind,
            self.input_domain,
            self.input_length,
            self.channels,
            self.num_classes,
            self.filters,
            kernels.join(","),
            self.resnet_blocks,
            self.resnet_kernel,
            self.stem_kernel,
            self.hidden,
            self.dropout
        )
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let map = parse_key_values(text);
        let get = |k: &str| {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("model manifest lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("model manifest: {k} is not a count")))
        };
        let kernels = get("fcn_kernels")?
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config("model manifest: bad fcn_kernels".into()))?;
        let spec = ModelSpec {
            kind: get("kind")?.parse()?,
            input_domain: get("input_domain")?.parse()?,
            input_length: num("input_length")?,
            channels: num("channels")?,
            num_classes: num("num_classes")?,
            filters: num("filters")?,
            fcn_kernels: kernels,
            resnet_blocks: num("resnet_blocks")?,
            resnet_kernel: num("resnet_kernel")?,
            stem_kernel: num("stem_kernel")?,
            hidden: num("hidden")?,
            dropout: get("dropout")?
                .parse()
                .map_err(|_| Error::Config("model manifest: bad dropout".into()))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Forward outputs: class scores and, for the joint LSTM, next-step
/// predictions with their targets.
#[derive(Debug)]
pub struct Outputs {
    pub logits: Var,
    pub next_step: Option<(Var, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub input_norm: BatchNormStats,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn conv_params<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, k: usize, cin: usize, cout: usize, rng: &mut R) {
    store.insert(format!("{prefix}.w"), he_init(&[k, cin, cout], k * cin, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros([cout]));
}

fn dense_params<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, n: usize, m: usize, rng: &mut R) {
    store.insert(format!("{prefix}.w"), he_init(&[n, m], n, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros([m]));
}

fn input_norm_params(store: &mut ParamStore, channels: usize) {
    store.insert("bn.gamma", Tensor::full([channels], 1.0));
    store.insert("bn.beta", Tensor::zeros([channels]));
}

fn require_kind(spec: &ModelSpec, ok: bool, what: &str) -> Result<()> {
    if ok {
        spec.validate()
    } else {
        Err(Error::Config(format!("{what} builder called for a {} spec", spec.kind)))
    }
}

/// Input normalization, convolution blocks (conv, ELU, max-pool), global
/// average pooling and a dense softmax head.
pub fn build_fcn(spec: &ModelSpec, seed: u64) -> Result<TrainedModel> {
    require_kind(spec, spec.kind == ModelKind::Fcn, "fcn")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    input_norm_params(&mut p, spec.channels);
    let mut cin = spec.channels;
    for (i, &k) in spec.fcn_kernels.iter().enumerate() {
        conv_params(&mut p, &format!("conv{i}"), k, cin, spec.filters, &mut rng);
        cin = spec.filters;
    }
    dense_params(&mut p, "head", spec.filters, spec.num_classes, &mut rng);
    Ok(TrainedModel::from_params(spec.clone(), p))
}

/// Input normalization, a stem convolution, residual blocks with identity
/// skips (a 1x1 projection and pooling on the downsampling blocks), global
/// average pooling and a dense softmax head.
pub fn build_resnet(spec: &ModelSpec, seed: u64) -> Result<TrainedModel> {
    require_kind(spec, spec.kind == ModelKind::Resnet, "resnet")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let f = spec.filters;
    input_norm_params(&mut p, spec.channels);
    conv_params(&mut p, "stem", spec.stem_kernel, spec.channels, f, &mut rng);
    for i in 0..spec.resnet_blocks {
        conv_params(&mut p, &format!("block{i}.conv1"), spec.resnet_kernel, f, f, &mut rng);
        conv_params(&mut p, &format!("block{i}.conv2"), spec.resnet_kernel, f, f, &mut rng);
        if i > 0 {
            conv_params(&mut p, &format!("block{i}.proj"), 1, f, f, &mut rng);
        }
    }
    dense_params(&mut p, "head", f, spec.num_classes, &mut rng);
    Ok(TrainedModel::from_params(spec.clone(), p))
}

/// A single LSTM layer unrolled over the input; the last hidden state feeds
/// a dense softmax head. The joint variant adds a time-distributed dense
/// layer predicting the next input sample at every step.
pub fn build_lstm(spec: &ModelSpec, seed: u64, joint: bool) -> Result<TrainedModel> {
    let want = if joint { ModelKind::LstmJoint } else { ModelKind::LstmFinal };
    require_kind(spec, spec.kind == want, "lstm")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let h = spec.hidden;
    input_norm_params(&mut p, spec.channels);
    p.insert("lstm.wx", he_init(&[spec.channels, 4 * h], spec.channels, &mut rng));
    p.insert("lstm.wh", he_init(&[h, 4 * h], h, &mut rng));
    p.insert("lstm.b", Tensor::zeros([4 * h]));
    dense_params(&mut p, "head", h, spec.num_classes, &mut rng);
    if joint {
        dense_params(&mut p, "pred", h, spec.channels, &mut rng);
    }
    Ok(TrainedModel::from_params(spec.clone(), p))
}

impl TrainedModel {
    fn from_params(spec: ModelSpec, params: ParamStore) -> Self {
        TrainedModel {
            input_norm: BatchNormStats::new(spec.channels),
            spec,
            params,
            epoch_losses: Vec::new(),
        }
    }

    /// Builds and initializes the topology named by `spec.kind`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        match spec.kind {
            ModelKind::Fcn => build_fcn(spec, seed),
            ModelKind::Resnet => build_resnet(spec, seed),
            ModelKind::LstmFinal => build_lstm(spec, seed, false),
            ModelKind::LstmJoint => build_lstm(spec, seed, true),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1] != self.spec.input_length || shape[2] != self.spec.channels {
            return Err(Error::Shape(format!(
                "model expects [B, {}, {}], got {shape:?}",
                self.spec.input_length, self.spec.channels
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `x: [B, L, C]` on `g`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        norm: &mut BatchNormStats,
        rng: &mut R,
    ) -> Result<Outputs> {
        self.check_input(g.shape(x))?;
        let p = &self.params;
        let gamma = g.param(p, "bn.gamma")?;
        let beta = g.param(p, "bn.beta")?;
        let xn = g.batch_norm(x, gamma, beta, norm, mode)?;
        match self.spec.kind {
            ModelKind::Fcn => {
                let mut h = xn;
                for i in 0..self.spec.fcn_kernels.len() {
                    let w = g.param(p, &format!("conv{i}.w"))?;
                    let b = g.param(p, &format!("conv{i}.b"))?;
                    h = g.conv1d(h, w, b)?;
                    h = g.elu(h);
                    h = g.max_pool2(h)?;
                }
                let pooled = g.global_avg_pool(h)?;
                let logits = self.head(g, pooled, mode, rng)?;
                Ok(Outputs {
                    logits,
                    next_step: None,
                })
            }
            ModelKind::Resnet => {
                let h = self.resnet_trunk(g, xn, true)?;
                let h = g.elu(h);
                let pooled = g.global_avg_pool(h)?;
                let logits = self.head(g, pooled, mode, rng)?;
                Ok(Outputs {
                    logits,
                    next_step: None,
                })
            }
            ModelKind::LstmFinal | ModelKind::LstmJoint => self.lstm_forward(g, x, xn, mode, rng),
        }
    }

    fn head<R: Rng + ?Sized>(&self, g: &mut Graph, features: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let d = g.dropout(features, self.spec.dropout, mode, rng)?;
        let w = g.param(&self.params, "head.w")?;
        let b = g.param(&self.params, "head.b")?;
        g.linear(d, w, Some(b))
    }

    /// Stem and residual blocks. With `branches == false` only the skip
    /// paths are evaluated.
    pub(crate) fn resnet_trunk(&self, g: &mut Graph, xn: Var, branches: bool) -> Result<Var> {
        let p = &self.params;
        let (sw, sb) = (g.param(p, "stem.w")?, g.param(p, "stem.b")?);
        let mut h = g.conv1d(xn, sw, sb)?;
        for i in 0..self.spec.resnet_blocks {
            let skip = if i == 0 {
                h
            } else {
                let (pw, pb) = (g.param(p, &format!("block{i}.proj.w"))?, g.param(p, &format!("block{i}.proj.b"))?);
                let proj = g.conv1d(h, pw, pb)?;
                g.max_pool2(proj)?
            };
            if !branches {
                h = skip;
                continue;
            }
            let (w1, b1) = (g.param(p, &format!("block{i}.conv1.w"))?, g.param(p, &format!("block{i}.conv1.b"))?);
            let (w2, b2) = (g.param(p, &format!("block{i}.conv2.w"))?, g.param(p, &format!("block{i}.conv2.b"))?);
            let a = g.elu(h);
            let a = g.conv1d(a, w1, b1)?;
            let a = g.elu(a);
            let mut branch = g.conv1d(a, w2, b2)?;
            if i > 0 {
                branch = g.max_pool2(branch)?;
            }
            h = g.add(skip, branch)?;
        }
        Ok(h)
    }

    fn lstm_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        x: Var,
        xn: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Outputs> {
        let p = &self.params;
        let (batch, len, ch) = {
            let s = g.shape(x);
            (s[0], s[1], s[2])
        };
        let hidden = self.spec.hidden;
        let joint = self.spec.kind == ModelKind::LstmJoint;
        let wx = g.param(p, "lstm.wx")?;
        let wh = g.param(p, "lstm.wh")?;
        let b = g.param(p, "lstm.b")?;

        let flat = g.reshape(xn, &[batch * len, ch])?;
        let proj = g.linear(flat, wx, Some(b))?;
        let proj = g.reshape(proj, &[batch, len, 4 * hidden])?;
        let mut state = g.constant(Tensor::zeros([batch, 2 * hidden]));
        let mut hs = Vec::with_capacity(if joint { len } else { 0 });
        for t in 0..len {
            let xt = g.slice_time(proj, t)?;
            state = g.lstm_cell(xt, state, wh)?;
            if joint && t + 1 < len {
                hs.push(g.narrow(state, 0, hidden)?);
            }
        }
        let last = g.narrow(state, 0, hidden)?;
        let logits = self.head(g, last, mode, rng)?;

        let next_step = if joint && len > 1 {
            let stacked = g.stack_time(&hs)?;
            let flat = g.reshape(stacked, &[batch * (len - 1), hidden])?;
            let (pw, pb) = (g.param(p, "pred.w")?, g.param(p, "pred.b")?);
            let pred = g.linear(flat, pw, Some(pb))?;
            let pred = g.reshape(pred, &[batch, len - 1, ch])?;
            let xd = g.value(x).data();
            let mut target = Vec::with_capacity(batch * (len - 1) * ch);
            for bi in 0..batch {
                target.extend_from_slice(&xd[(bi * len + 1) * ch..(bi * len + len) * ch]);
            }
            Some((pred, Tensor::new([batch, len - 1, ch], target)?))
        } else {
            None
        };
        Ok(Outputs { logits, next_step })
    }

    /// Eval-mode pre-softmax scores for `[B, L, C]`.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let mut norm = self.input_norm.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, x, Mode::Eval, &mut norm, &mut rng)?;
        Ok(g.value(out.logits).clone())
    }

    /// The network as a chain of frozen layers, for relevance propagation.
    pub fn as_sequential(&self) -> Result<Sequential> {
        if self.spec.kind != ModelKind::Fcn {
            return Err(Error::UnsupportedLayer(format!(
                "{} networks are not a plain layer chain",
                self.spec.kind
            )));
        }
        let t = |name: &str| -> Result<Tensor> {
            self.params
                .get(name)
                .map(|p| p.value.clone())
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        let mut layers = vec![Layer::BatchNorm {
            gamma: t("bn.gamma")?.into_data(),
            beta: t("bn.beta")?.into_data(),
            mean: self.input_norm.mean.clone(),
            var: self.input_norm.var.clone(),
        }];
        for i in 0..self.spec.fcn_kernels.len() {
            layers.push(Layer::Conv1d {
                w: t(&format!("conv{i}.w"))?,
                b: t(&format!("conv{i}.b"))?,
            });
            layers.push(Layer::Elu);
            layers.push(Layer::MaxPool2);
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Dense {
            w: t("head.w")?,
            b: t("head.b")?,
        });
        Ok(Sequential {
            input_length: self.spec.input_length,
            channels: self.spec.channels,
            layers,
        })
    }

    fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let c = self.spec.channels;
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, p)| (n.to_string(), p.value.clone()))
            .collect();
        out.push((
            "input_norm.running_mean".into(),
            Tensor::new([c], self.input_norm.mean.clone()).expect("channel count"),
        ));
        out.push((
            "input_norm.running_var".into(),
            Tensor::new([c], self.input_norm.var.clone()).expect("channel count"),
        ));
        out
    }

    /// Checkpoint bytes: parameters followed by the input-normalization
    /// running statistics.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.checkpoint_tensors()).expect("writing to memory");
        buf
    }

    /// Writes `<stem>.ckpt` and the `<stem>.spec` sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.ckpt")), self.checkpoint_bytes())?;
        let mut sidecar = self.spec.to_manifest();
        let losses: Vec<String> = self.epoch_losses.iter().map(|l| format!("{l:e}")).collect();
        sidecar.push_str(&format!("epoch_losses = {}\n", losses.join(",")));
        fs::write(dir.join(format!("{stem}.spec")), sidecar)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let sidecar = fs::read_to_string(dir.join(format!("{stem}.spec")))?;
        let spec = ModelSpec::from_manifest(&sidecar)?;
        let mut model = TrainedModel::init(&spec, 0)?;
        let expected = model.params.names();
        let tensors = read_checkpoint(fs::File::open(dir.join(format!("{stem}.ckpt")))?)?;
        let mut seen = Vec::new();
        for (name, t) in tensors {
            match name.as_str() {
                "input_norm.running_mean" => model.input_norm.mean = t.into_data(),
                "input_norm.running_var" => model.input_norm.var = t.into_data(),
                _ => {
                    let p = model
                        .params
                        .get_mut(&name)
                        .ok_or_else(|| Error::Format(format!("checkpoint has unknown tensor {name}")))?;
                    if p.value.shape() != t.shape() {
                        return Err(Error::Format(format!("tensor {name} has shape {:?}", t.shape())));
                    }
                    p.value = t;
                    seen.push(name);
                }
            }
        }
        seen.sort();
        if seen != expected {
            return Err(Error::Format("checkpoint does not cover every parameter".into()));
        }
        if let Some(losses) = parse_key_values(&sidecar).get("epoch_losses") {
            model.epoch_losses = losses
                .split(',')
                .filter(|s| !s.is_empty())
                .filter_map(|s| s.parse().ok())
                .collect();
        }
        Ok(model)
    }
}

/// Eval-mode class probabilities `[B x K]`, evaluated in chunks.
pub fn predict(model: &TrainedModel, batch: &WindowBatch) -> Result<Vec<Vec<f64>>> {
    predict_tensor(model, &batch.tensor)
}

pub fn predict_tensor(model: &TrainedModel, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
    model.check_input(batch.shape())?;
    let s = batch.shape();
    let (b, per) = (s[0], s[1] * s[2]);
    let k = model.spec.num_classes;
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(b);
    for start in (0..b).step_by(CHUNK) {
        let n = CHUNK.min(b - start);
        let chunk = Tensor::new([n, s[1], s[2]], batch.data()[start * per..(start + n) * per].to_vec())?;
        let logits = model.logits(&chunk)?;
        out.extend(softmax_rows(logits.data(), k).chunks_exact(k).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Models with identical specs whose softmax outputs are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<TrainedModel>,
}

/// Default ensemble size.
pub const ENSEMBLE_SIZE: usize = 5;

impl Ensemble {
    pub fn new(members: Vec<TrainedModel>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("an ensemble needs at least one member".into()))?;
        if members.iter().any(|m| m.spec != first.spec) {
            return Err(Error::Config("ensemble members differ in spec".into()));
        }
        Ok(Ensemble { members })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.members[0].spec
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn save(&self, dir: &Path, prefix: &str) -> Result<()> {
        for (i, m) in self.members.iter().enumerate() {
            m.save(dir, &format!("{prefix}_member{i}"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, prefix: &str) -> Result<Self> {
        let mut members = Vec::new();
        while dir.join(format!("{prefix}_member{}.ckpt", members.len())).exists() {
            members.push(TrainedModel::load(dir, &format!("{prefix}_member{}", members.len()))?);
        }
        Ensemble::new(members)
    }
}

/// Mean of the members' softmax outputs.
pub fn ensemble_predict(ensemble: &Ensemble, batch: &WindowBatch) -> Result<Vec<Vec<f64>>> {
    ensemble_predict_tensor(ensemble, &batch.tensor)
}

pub fn ensemble_predict_tensor(ensemble: &Ensemble, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
    let spec = ensemble.spec();
    if ensemble.members.iter().any(|m| &m.spec != spec) {
        return Err(Error::Config("ensemble members differ in spec".into()));
    }
    let per_member = ensemble
        .members
        .iter()
        .map(|m| predict_tensor(m, batch))
        .collect::<Result<Vec<_>>>()?;
    Ok(average_probabilities(&per_member))
}

/// Element-wise mean of equally shaped probability matrices.
pub fn average_probabilities(members: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = members.len() as f64;
    let mut acc = members[0].clone();
    for m in &members[1..] {
        for (row, other) in acc.iter_mut().zip(m) {
            row.iter_mut().zip(other).for_each(|(a, b)| *a += b);
        }
    }
    for row in &mut acc {
        row.iter_mut().for_each(|v| *v /= n);
    }
    acc
}
