//! Training loops, record-level prediction, metrics and cross-validation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{adam_step, clip_gradients, AdamConfig, Graph, Mode, Tensor};
use crate::dataset::{
    assign_folds, healthy_multiplicity, load_record, DatasetSelection, ExperimentPreset, LabelScheme,
    RecordEntry,
};
use crate::error::{Error, Result};
use crate::models::{ensemble_predict_tensor, Ensemble, ModelKind, ModelSpec, TrainedModel};
use crate::wfdb::{select_channels, ChannelSet, SignalRecord};
use crate::windowing::{featurize, sample_window, InputDomain, WindowConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub train_windows_per_record_per_epoch: usize,
    pub eval_windows_per_record: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm bound; used for the recurrent models.
    pub clip_norm: Option<f64>,
    pub ensemble_size: usize,
    pub num_folds: usize,
    pub window_seconds: f64,
    pub target_length: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            train_windows_per_record_per_epoch: 8,
            eval_windows_per_record: 32,
            seed: 0,
            adam: AdamConfig::default(),
            clip_norm: None,
            ensemble_size: crate::models::ENSEMBLE_SIZE,
            num_folds: 10,
            window_seconds: 4.0,
            target_length: 192,
        }
    }
}

impl TrainConfig {
    /// Defaults for a model family: recurrent models clip at norm 5.
    pub fn for_model(kind: ModelKind) -> Self {
        TrainConfig {
            clip_norm: kind.is_lstm().then_some(5.0),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("train_windows_per_record_per_epoch", self.train_windows_per_record_per_epoch),
            ("eval_windows_per_record", self.eval_windows_per_record),
            ("ensemble_size", self.ensemble_size),
            ("target_length", self.target_length),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.num_folds < 2 {
            return Err(Error::Config("need at least 2 folds".into()));
        }
        if !(self.window_seconds > 0.0) {
            return Err(Error::Config("window_seconds must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        self.adam.validate()
    }

    pub fn window_config(&self) -> WindowConfig {
        WindowConfig {
            window_seconds: self.window_seconds,
            target_length: self.target_length,
            eval_windows_per_record: self.eval_windows_per_record,
            train_windows_per_record_per_epoch: self.train_windows_per_record_per_epoch,
            rng_seed: self.seed,
        }
    }
}

/// A training record with its class under the training label scheme.
#[derive(Debug, Clone)]
pub struct TrainExample<'a> {
    pub record: &'a SignalRecord,
    pub class: usize,
    pub multiplicity: usize,
}

/// Draws one random window and converts it to network input `[L x C]`.
pub fn draw_input<R: rand::Rng + ?Sized>(
    record: &SignalRecord,
    cfg: &TrainConfig,
    domain: InputDomain,
    rng: &mut R,
) -> Result<Tensor> {
    let (_, raw) = sample_window(record, &cfg.window_config(), rng)?;
    featurize(&raw, cfg.target_length, domain)
}

fn stack(windows: &[Tensor]) -> Result<Tensor> {
    let shape = windows[0].shape();
    let data = windows.iter().flat_map(|w| w.data().iter().copied()).collect();
    Tensor::new([windows.len(), shape[0], shape[1]], data)
}

/// Batch boundaries; a trailing batch of one joins its predecessor, since
/// training-mode normalization needs two rows.
fn batch_ranges(n: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n).step_by(size).map(|s| (s, (s + size).min(n))).collect();
    if out.len() > 1 && out.last().is_some_and(|(s, e)| e - s < 2) {
        let (_, end) = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").1 = end;
    }
    out
}

/// Trains one model from `seed`. With zero epochs the initialization is
/// returned unchanged.
pub fn train_model(spec: &ModelSpec, cfg: &TrainConfig, examples: &[TrainExample], seed: u64) -> Result<TrainedModel> {
    cfg.validate()?;
    let mut model = TrainedModel::init(spec, seed)?;
    if cfg.epochs == 0 {
        return Ok(model);
    }
    for class in 0..spec.num_classes {
        if !examples.iter().any(|e| e.class == class) {
            return Err(Error::Data(format!("class {class} has no training records")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut schedule = Vec::new();
    for (i, e) in examples.iter().enumerate() {
        schedule.extend(std::iter::repeat_n(i, e.multiplicity * cfg.train_windows_per_record_per_epoch));
    }
    if schedule.len() < 2 {
        return Err(Error::Data("an epoch needs at least two windows".into()));
    }
    let mut balance = 1.0;
    for _ in 0..cfg.epochs {
        schedule.shuffle(&mut rng);
        let mut ce_sum = 0.0;
        let mut mse_sum = 0.0;
        for (start, end) in batch_ranges(schedule.len(), cfg.batch_size) {
            let idx = &schedule[start..end];
            let windows = idx
                .iter()
                .map(|&i| draw_input(examples[i].record, cfg, spec.input_domain, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = idx.iter().map(|&i| examples[i].class).collect();
            let (ce, mse) = train_step(&mut model, cfg, stack(&windows)?, &labels, balance, &mut rng)?;
            ce_sum += ce * idx.len() as f64;
            mse_sum += mse.unwrap_or(0.0) * idx.len() as f64;
        }
        let n = schedule.len() as f64;
        let (ce_mean, mse_mean) = (ce_sum / n, mse_sum / n);
        if spec.kind == ModelKind::LstmJoint && mse_mean > 0.0 {
            balance = ce_mean / mse_mean;
        }
        model.epoch_losses.push(ce_mean);
    }
    Ok(model)
}

/// One optimizer step; returns the batch cross-entropy and, for the joint
/// model, the next-step error.
fn train_step(
    model: &mut TrainedModel,
    cfg: &TrainConfig,
    batch: Tensor,
    labels: &[usize],
    balance: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Option<f64>)> {
    let mut g = Graph::new();
    let x = g.constant(batch);
    let mut norm = model.input_norm.clone();
    let out = model.forward(&mut g, x, Mode::Train, &mut norm, rng)?;
    let ce = g.cross_entropy(out.logits, labels)?;
    let ce_value = g.value(ce).data()[0];
    let (loss, mse_value) = match out.next_step {
        Some((pred, target)) => {
            let mse = g.mse(pred, &target)?;
            let v = g.value(mse).data()[0];
            let weighted = g.scale(mse, balance);
            (g.add(ce, weighted)?, Some(v))
        }
        None => (ce, None),
    };
    g.backward(loss)?;
    model.params.zero_grad();
    model.params.accumulate(&g);
    if let Some(c) = cfg.clip_norm {
        clip_gradients(&mut model.params, c);
    }
    adam_step(&mut model.params, &cfg.adam)?;
    model.input_norm = norm;
    Ok((ce_value, mse_value))
}

/// Trains `cfg.ensemble_size` members with seeds `cfg.seed + m`.
pub fn train_ensemble(spec: &ModelSpec, cfg: &TrainConfig, examples: &[TrainExample]) -> Result<Ensemble> {
    let members = (0..cfg.ensemble_size as u64)
        .into_par_iter()
        .map(|m| train_model(spec, cfg, examples, cfg.seed.wrapping_add(m)))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members)
}

/// Provides channel-selected signals for selected records.
pub trait RecordSource: Sync {
    fn load(&self, entry: &RecordEntry) -> Result<SignalRecord>;
}

/// Records under a PTB-style `<root>/<patient>/<record>` tree.
#[derive(Debug, Clone)]
pub struct DirSource {
    pub root: PathBuf,
    pub channels: ChannelSet,
}

impl RecordSource for DirSource {
    fn load(&self, entry: &RecordEntry) -> Result<SignalRecord> {
        select_channels(&load_record(&self.root, entry)?, self.channels)
    }
}

/// Records already in memory, keyed by record id.
#[derive(Debug, Clone)]
pub struct MemorySource {
    pub records: BTreeMap<String, SignalRecord>,
    pub channels: ChannelSet,
}

impl RecordSource for MemorySource {
    fn load(&self, entry: &RecordEntry) -> Result<SignalRecord> {
        let r = self
            .records
            .get(&entry.record_id)
            .ok_or_else(|| Error::Data(format!("record {} is not loaded", entry.record_id)))?;
        select_channels(r, self.channels)
    }
}

fn training_examples<'a>(
    entries: &[&RecordEntry],
    records: &'a BTreeMap<String, SignalRecord>,
    scheme: LabelScheme,
) -> Vec<TrainExample<'a>> {
    entries
        .iter()
        .filter_map(|e| {
            let class = scheme.class_of(e.label)?;
            Some(TrainExample {
                record: &records[&e.record_id],
                class,
                multiplicity: healthy_multiplicity(e.label),
            })
        })
        .collect()
}

/// Trains an ensemble on the training split of `fold`. Only training
/// records are ever loaded.
pub fn train_fold(
    selection: &DatasetSelection,
    fold: usize,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    source: &dyn RecordSource,
) -> Result<Ensemble> {
    if fold >= selection.num_folds() {
        return Err(Error::Config(format!("fold {fold} of {}", selection.num_folds())));
    }
    let train = selection.train_entries(fold);
    let records = train
        .iter()
        .map(|e| Ok((e.record_id.clone(), source.load(e)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    train_ensemble(spec, cfg, &training_examples(&train, &records, selection.label_scheme))
}

/// FNV-1a, for stable per-record seeds.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of the evaluation windows of a record.
pub fn eval_seed(record_id: &str, seed: u64) -> u64 {
    fnv1a(record_id) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// The evaluation windows of a record, `[W x L x C]`.
pub fn eval_windows(record: &SignalRecord, cfg: &TrainConfig, domain: InputDomain) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(record.name(), cfg.seed));
    let windows = (0..cfg.eval_windows_per_record)
        .map(|_| draw_input(record, cfg, domain, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    stack(&windows)
}

/// Column means of window-level probability rows.
pub fn aggregate_windows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut acc = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        acc.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Class decision: MI at `P(MI) >= 0.5` for two classes, argmax otherwise.
pub fn decide(probs: &[f64]) -> usize {
    if probs.len() == 2 {
        usize::from(probs[1] >= 0.5)
    } else {
        probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }
}

/// Mean ensemble softmax over the record's seeded evaluation windows.
pub fn predict_record(ensemble: &Ensemble, record: &SignalRecord, cfg: &TrainConfig) -> Result<(Vec<f64>, usize)> {
    let windows = eval_windows(record, cfg, ensemble.spec().input_domain)?;
    let probs = aggregate_windows(&ensemble_predict_tensor(ensemble, &windows)?);
    let class = decide(&probs);
    Ok((probs, class))
}

// -------------------------------------------------------------- metrics

/// Record-level confusion counts, MI positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth_mi: bool, predicted_mi: bool) {
        match (truth_mi, predicted_mi) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
        }
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionMatrix {
            tp: self.tp + o.tp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
        }
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionMatrix::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub sensitivity: f64,
    pub specificity: f64,
    /// NaN when nothing was predicted positive.
    pub precision: f64,
    pub youden_j: f64,
}

pub fn youden_j(sensitivity: f64, specificity: f64) -> f64 {
    sensitivity + specificity - 1.0
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    if cm.positives() == 0 || cm.negatives() == 0 {
        return Err(Error::MetricUndefined(format!(
            "{} positive and {} negative records",
            cm.positives(),
            cm.negatives()
        )));
    }
    let sensitivity = cm.tp as f64 / cm.positives() as f64;
    let specificity = cm.tn as f64 / cm.negatives() as f64;
    let precision = if cm.tp + cm.fp == 0 {
        f64::NAN
    } else {
        cm.tp as f64 / (cm.tp + cm.fp) as f64
    };
    Ok(Metrics {
        sensitivity,
        specificity,
        precision,
        youden_j: youden_j(sensitivity, specificity),
    })
}

// ------------------------------------------------------ cross-validation

#[derive(Debug, Clone, PartialEq)]
pub struct RecordPrediction {
    pub record_id: String,
    pub patient_id: String,
    pub fold: usize,
    pub truth_mi: bool,
    pub p_mi: f64,
}

/// Confusion counts when MI is called at `p_mi >= threshold`.
pub fn confusion_at(predictions: &[RecordPrediction], threshold: f64) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for p in predictions {
        cm.record(p.truth_mi, p.p_mi >= threshold);
    }
    cm
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValReport {
    pub preset: String,
    pub model: String,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub predictions: Vec<RecordPrediction>,
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.6}")
    }
}

impl CrossValReport {
    /// Sum of per-fold confusion counts.
    pub fn pooled(&self) -> ConfusionMatrix {
        self.folds.iter().map(|f| f.confusion).sum()
    }

    pub fn pooled_metrics(&self) -> Result<Metrics> {
        compute_metrics(&self.pooled())
    }

    /// Unweighted average of the defined per-fold metrics.
    pub fn mean_metrics(&self) -> Option<Metrics> {
        let ms: Vec<&Metrics> = self.folds.iter().filter_map(|f| f.metrics.as_ref()).collect();
        if ms.is_empty() {
            return None;
        }
        let n = ms.len() as f64;
        let mean = |f: fn(&Metrics) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / n;
        let sensitivity = mean(|m| m.sensitivity);
        let specificity = mean(|m| m.specificity);
        Some(Metrics {
            sensitivity,
            specificity,
            precision: mean(|m| m.precision),
            youden_j: youden_j(sensitivity, specificity),
        })
    }

    /// One row per fold and a pooled row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["fold", "TP", "FN", "TN", "FP", "sens", "spec", "prec", "J"])?;
        let row = |label: String, cm: &ConfusionMatrix, m: Option<Metrics>| {
            let (s, sp, p, j) = m.map_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN), |m| {
                (m.sensitivity, m.specificity, m.precision, m.youden_j)
            });
            vec![
                label,
                cm.tp.to_string(),
                cm.fn_.to_string(),
                cm.tn.to_string(),
                cm.fp.to_string(),
                fmt_metric(s),
                fmt_metric(sp),
                fmt_metric(p),
                fmt_metric(j),
            ]
        };
        for f in &self.folds {
            w.write_record(row(f.fold.to_string(), &f.confusion, f.metrics))?;
        }
        w.write_record(row("pooled".into(), &self.pooled(), self.pooled_metrics().ok()))?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Per-record MI probabilities.
    pub fn predictions_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["record_id", "patient_id", "fold", "truth", "p_mi"])?;
        for p in &self.predictions {
            w.write_record([
                p.record_id.clone(),
                p.patient_id.clone(),
                p.fold.to_string(),
                if p.truth_mi { "MI" } else { "HC" }.to_string(),
                format!("{:.9}", p.p_mi),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let cm = self.pooled();
        let _ = writeln!(s, "preset {} model {} seed {}", self.preset, self.model, self.seed);
        let _ = writeln!(s, "folds {}", self.folds.len());
        let _ = writeln!(s, "pooled TP {} FN {} TN {} FP {}", cm.tp, cm.fn_, cm.tn, cm.fp);
        match self.pooled_metrics() {
            Ok(m) => {
                let _ = writeln!(
                    s,
                    "pooled sens {} spec {} prec {} J {}",
                    fmt_metric(m.sensitivity),
                    fmt_metric(m.specificity),
                    fmt_metric(m.precision),
                    fmt_metric(m.youden_j)
                );
            }
            Err(e) => {
                let _ = writeln!(s, "pooled metrics undefined: {e}");
            }
        }
        if let Some(m) = self.mean_metrics() {
            let _ = writeln!(
                s,
                "fold mean sens {} spec {} prec {} J {}",
                fmt_metric(m.sensitivity),
                fmt_metric(m.specificity),
                fmt_metric(m.precision),
                fmt_metric(m.youden_j)
            );
        }
        s
    }
}

/// Model spec matching a preset's channels and training label scheme.
pub fn spec_for_preset(kind: ModelKind, domain: InputDomain, preset: &ExperimentPreset) -> ModelSpec {
    ModelSpec::new(kind, domain, preset.channels.len(), preset.train_scheme.num_classes())
}

/// Called with each fold's trained ensemble, e.g. to write checkpoints.
pub type FoldHook<'a> = &'a (dyn Fn(usize, &Ensemble) -> Result<()> + Sync);

/// Patient-level k-fold cross-validation of one preset. Positives in the
/// evaluation set are restricted to the preset's subset; all healthy
/// controls are kept.
pub fn run_crossval(
    preset: &ExperimentPreset,
    entries: &[RecordEntry],
    spec: &ModelSpec,
    cfg: &TrainConfig,
    source: &dyn RecordSource,
    hook: Option<FoldHook>,
) -> Result<CrossValReport> {
    cfg.validate()?;
    spec.validate()?;
    if spec.channels != preset.channels.len() || spec.num_classes != preset.train_scheme.num_classes() {
        return Err(Error::Config(format!(
            "model takes {} channels / {} classes, preset {} needs {} / {}",
            spec.channels,
            spec.num_classes,
            preset.name,
            preset.channels.len(),
            preset.train_scheme.num_classes()
        )));
    }
    let selection = assign_folds(&preset.select(entries)?, cfg.num_folds, cfg.seed)?;
    let folds = (0..cfg.num_folds)
        .into_par_iter()
        .map(|fold| -> Result<(FoldResult, Vec<RecordPrediction>)> {
            let ensemble = train_fold(&selection, fold, spec, cfg, source)?;
            if let Some(h) = hook {
                h(fold, &ensemble)?;
            }
            let mut cm = ConfusionMatrix::default();
            let mut preds = Vec::new();
            for e in selection.test_entries(fold) {
                if !preset.eval_subset.includes(e.label) {
                    continue;
                }
                let record = source.load(e)?;
                let (probs, _) = predict_record(&ensemble, &record, cfg)?;
                let p_mi = selection.label_scheme.mi_probability(&probs);
                let truth_mi = e.label.is_mi();
                cm.record(truth_mi, p_mi >= 0.5);
                preds.push(RecordPrediction {
                    record_id: e.record_id.clone(),
                    patient_id: e.patient_id.clone(),
                    fold,
                    truth_mi,
                    p_mi,
                });
            }
            let metrics = compute_metrics(&cm).ok();
            Ok((
                FoldResult {
                    fold,
                    confusion: cm,
                    metrics,
                },
                preds,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = CrossValReport {
        preset: preset.name.clone(),
        model: spec.kind.to_string(),
        seed: cfg.seed,
        folds: Vec::new(),
        predictions: Vec::new(),
    };
    for (f, p) in folds {
        report.folds.push(f);
        report.predictions.extend(p);
    }
    Ok(report)
}
