//! Command-line interface.
//!
//! Every option can come from a `key = value` config file or a flag; flags
//! win. Each run writes `run_manifest.txt` holding the resolved settings,
//! the tool version and a checksum of the input data, and `replay`
//! re-executes a run from such a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use sha2::{Digest, Sha256};

use crate::attribution::{attribute, render_figure, scores_csv, AttributionMethod, IgConfig};
use crate::autodiff::Tensor;
use crate::dataset::{
    assign_folds, benchmark_preset, scan_data_root, write_manifest, DatasetSelection, ExperimentPreset, RecordEntry,
};
use crate::error::{Error, Result};
use crate::models::{parse_key_values, Ensemble, ModelKind, ModelSpec};
use crate::synth::{export, generate, SynthConfig};
use crate::training::{
    aggregate_windows, compute_metrics, eval_windows, run_crossval, spec_for_preset, train_fold, ConfusionMatrix,
    CrossValReport, DirSource, FoldResult, RecordSource, TrainConfig,
};
use crate::wfdb::{select_channels, ChannelSet};
use crate::windowing::{downsample, extract_window, InputDomain};

pub const MANIFEST_FILE: &str = "run_manifest.txt";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "ecgforge", version, about = "Myocardial-infarction classification from raw ECG")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct GlobalArgs {
    /// Root of a PTB-style `<patient>/<record>` tree.
    #[arg(long, env = "ECGFORGE_DATA", global = true)]
    pub data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// fcn, resnet, lstm or lstm-joint.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// time or freq.
    #[arg(long, global = true)]
    pub domain: Option<String>,
    /// all15, twelve, eight, frank, limb or a single lead such as II.
    #[arg(long, global = true)]
    pub channels: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// `key = value` settings file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` setting, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan the data root and write the selection manifest with folds.
    Ingest,
    /// Write a synthetic WFDB dataset into the output directory.
    Synth {
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        st_offset: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train the ensemble of one cross-validation fold.
    Train {
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Full cross-validated run of a preset.
    Crossval,
    /// Apply a saved ensemble to records; with a fold, to its test records.
    Evaluate {
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        /// Comma-separated record ids.
        #[arg(long)]
        records: Option<String>,
    },
    /// Attribution figure and score table for records.
    Attribute {
        #[arg(long)]
        models: Option<PathBuf>,
        /// Comma-separated record ids.
        #[arg(long)]
        records: Option<String>,
        /// grad_x_input, integrated_gradients or epsilon_lrp.
        #[arg(long)]
        method: Option<String>,
        /// Class whose score is explained; defaults to the MI class.
        #[arg(long)]
        target: Option<usize>,
    },
    /// Merge fold report CSVs into one report.
    Report {
        /// Comma-separated CSV paths.
        #[arg(long)]
        inputs: Option<String>,
    },
    /// Re-run the command recorded in a run manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Crossval => "crossval",
            Command::Evaluate { .. } => "evaluate",
            Command::Attribute { .. } => "attribute",
            Command::Report { .. } => "report",
            Command::Replay { .. } => "replay",
        }
    }
}

/// Every recognized setting with its default; empty means unset.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("data_root", ""),
    ("preset", "table3_default"),
    ("model", "fcn"),
    ("domain", "time"),
    ("channels", ""),
    ("seed", "0"),
    ("out_dir", "out"),
    ("folds", "10"),
    ("epochs", "30"),
    ("batch_size", "64"),
    ("train_windows", "8"),
    ("eval_windows", "32"),
    ("ensemble_size", "5"),
    ("filters", "128"),
    ("hidden", "256"),
    ("dropout", "0.5"),
    ("lr", "0.001"),
    ("clip_norm", ""),
    ("window_seconds", "4"),
    ("target_length", "192"),
    ("save_checkpoints", "false"),
    ("fold", "0"),
    ("models", ""),
    ("records", ""),
    ("method", "grad_x_input"),
    ("ig_steps", "256"),
    ("target", ""),
    ("inputs", ""),
    ("patients", "40"),
    ("records_per_patient", "1"),
    ("duration", "8"),
    ("st_offset", "0.2"),
    ("q_factor", "2"),
    ("noise", "0.05"),
];

/// Resolved settings: defaults, then the config file, then flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let key = key.trim().replace('-', "_");
        if !self.values.contains_key(&key) {
            return Err(Error::Config(format!("unknown setting {key:?}")));
        }
        self.values.insert(key, value.to_string().trim().to_string());
        Ok(())
    }

    /// Applies `key = value` text; unknown keys are rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text) {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn opt(&self, key: &str) -> Option<&str> {
        Some(self.get(key)).filter(|v| !v.is_empty())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("setting {key} = {:?} is not valid", self.get(key))))
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir"))
    }

    pub fn data_root(&self) -> Result<PathBuf> {
        let root = self
            .opt("data_root")
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config("no data root; pass --data-root or set ECGFORGE_DATA".into()))?;
        if !root.is_dir() {
            return Err(Error::Config(format!("data root {} is not a directory", root.display())));
        }
        Ok(root)
    }

    /// The preset with the channel override applied.
    pub fn preset(&self) -> Result<ExperimentPreset> {
        let mut p = benchmark_preset(self.get("preset"))?;
        if let Some(c) = self.opt("channels") {
            p.channels = c.parse()?;
        }
        Ok(p)
    }

    pub fn model_spec(&self, preset: &ExperimentPreset) -> Result<ModelSpec> {
        let kind: ModelKind = self.get("model").parse()?;
        let domain: InputDomain = self.get("domain").parse()?;
        let mut spec = spec_for_preset(kind, domain, preset);
        spec.input_length = crate::windowing::input_length(self.parse("target_length")?, domain);
        spec.filters = self.parse("filters")?;
        spec.hidden = self.parse("hidden")?;
        spec.dropout = self.parse("dropout")?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let kind: ModelKind = self.get("model").parse()?;
        let mut cfg = TrainConfig::for_model(kind);
        cfg.epochs = self.parse("epochs")?;
        cfg.batch_size = self.parse("batch_size")?;
        cfg.train_windows_per_record_per_epoch = self.parse("train_windows")?;
        cfg.eval_windows_per_record = self.parse("eval_windows")?;
        cfg.ensemble_size = self.parse("ensemble_size")?;
        cfg.num_folds = self.parse("folds")?;
        cfg.seed = self.parse("seed")?;
        cfg.adam.lr = self.parse("lr")?;
        cfg.window_seconds = self.parse("window_seconds")?;
        cfg.target_length = self.parse("target_length")?;
        if let Some(c) = self.opt("clip_norm") {
            cfg.clip_norm = if c == "none" { None } else { Some(self.parse("clip_norm")?) };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            patients_per_class: self.parse("patients")?,
            records_per_patient: self.parse("records_per_patient")?,
            duration_seconds: self.parse("duration")?,
            st_offset_mv: self.parse("st_offset")?,
            q_factor: self.parse("q_factor")?,
            noise_std_mv: self.parse("noise")?,
            seed: self.parse("seed")?,
            ..SynthConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }
}

/// Defaults, then `--config`, then flags and subcommand options.
pub fn resolve_settings(global: &GlobalArgs, command: &Command) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &global.config {
        s.apply_text(&fs::read_to_string(path)?)?;
    }
    let flags: [(&str, Option<String>); 7] = [
        ("data_root", global.data_root.as_ref().map(|p| absolute(p).display().to_string())),
        ("preset", global.preset.clone()),
        ("model", global.model.clone()),
        ("domain", global.domain.clone()),
        ("channels", global.channels.clone()),
        ("seed", global.seed.map(|v| v.to_string())),
        ("out_dir", global.out_dir.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            s.set(k, v)?;
        }
    }
    for kv in &global.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        s.set(k, v)?;
    }
    let opt = |v: Option<String>, k: &'static str| v.map(|v| (k, v));
    let extra: Vec<(&str, String)> = match command {
        Command::Synth {
            patients,
            st_offset,
            noise,
        } => [
            opt(patients.map(|v| v.to_string()), "patients"),
            opt(st_offset.map(|v| v.to_string()), "st_offset"),
            opt(noise.map(|v| v.to_string()), "noise"),
        ]
        .into_iter()
        .flatten()
        .collect(),
        Command::Train { fold } => opt(fold.map(|v| v.to_string()), "fold").into_iter().collect(),
        Command::Evaluate { models, fold, records } => [
            opt(models.as_ref().map(|p| p.display().to_string()), "models"),
            opt(fold.map(|v| v.to_string()), "fold"),
            opt(records.clone(), "records"),
        ]
        .into_iter()
        .flatten()
        .collect(),
        Command::Attribute {
            models,
            records,
            method,
            target,
        } => [
            opt(models.as_ref().map(|p| p.display().to_string()), "models"),
            opt(records.clone(), "records"),
            opt(method.clone(), "method"),
            opt(target.map(|v| v.to_string()), "target"),
        ]
        .into_iter()
        .flatten()
        .collect(),
        Command::Report { inputs } => opt(inputs.clone(), "inputs").into_iter().collect(),
        _ => Vec::new(),
    };
    if matches!(command, Command::Evaluate { fold: None, .. }) {
        s.set("fold", "")?;
    }
    for (k, v) in extra {
        s.set(k, v)?;
    }
    Ok(s)
}

/// Canonical form of an existing path, so manifests replay from any
/// working directory.
fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

// ------------------------------------------------------------- manifest

/// The resolved inputs of a run and what it wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub data_checksum: String,
    pub settings: Settings,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# ecgforge run manifest\n");
        s.push_str(&format!("command = {}\n", self.command));
        s.push_str(&format!("tool_version = {}\n", self.tool_version));
        s.push_str(&format!("data_checksum = {}\n", self.data_checksum));
        s.push_str(&format!("outputs = {}\n", self.outputs.join(",")));
        s.push_str("[settings]\n");
        s.push_str(&self.settings.to_text());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (head, body) = text
            .split_once("[settings]\n")
            .ok_or_else(|| Error::Format("run manifest lacks a [settings] section".into()))?;
        let head = parse_key_values(head);
        let get = |k: &str| {
            head.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("run manifest lacks {k}")))
        };
        let mut settings = Settings::default();
        settings.apply_text(body)?;
        Ok(RunManifest {
            command: get("command")?,
            tool_version: get("tool_version")?,
            data_checksum: get("data_checksum")?,
            settings,
            outputs: get("outputs")?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
        })
    }
}

/// SHA-256 over every `.hea` and `.dat` file below `root`, in sorted
/// relative-path order, each prefixed by its path.
pub fn data_checksum(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.as_bytes());
        h.update([0u8]);
        h.update(fs::read(root.join(&rel))?);
    }
    Ok(format!(
        "sha256:{}",
        h.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>()
    ))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let path = e?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.extension().is_some_and(|x| x == "hea" || x == "dat") {
            let rel = path.strip_prefix(root).expect("below root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

// ------------------------------------------------------------- commands

struct Ctx {
    settings: Settings,
    out: PathBuf,
    outputs: Vec<String>,
}

impl Ctx {
    fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.out.join(rel);
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        fs::write(&path, contents)?;
        self.outputs.push(rel.to_string());
        Ok(())
    }
}

fn load_selection(s: &Settings, preset: &ExperimentPreset) -> Result<(PathBuf, Vec<RecordEntry>, DatasetSelection)> {
    let root = s.data_root()?;
    let entries = scan_data_root(&root)?;
    if entries.is_empty() {
        return Err(Error::Data(format!("no labeled records below {}", root.display())));
    }
    let sel = assign_folds(&preset.select(&entries)?, s.parse("folds")?, s.parse("seed")?)?;
    Ok((root, entries, sel))
}

fn models_dir(s: &Settings) -> Result<PathBuf> {
    s.opt("models")
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config("no model directory; pass --models".into()))
}

fn cmd_ingest(ctx: &mut Ctx) -> Result<()> {
    let preset = ctx.settings.preset()?;
    let (_, _, sel) = load_selection(&ctx.settings, &preset)?;
    let mut buf = Vec::new();
    write_manifest(&mut buf, &sel)?;
    ctx.write("selection.csv", buf)
}

fn cmd_synth(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.settings.synth_config()?;
    let data = generate(&cfg)?;
    export(&ctx.out, &data)?;
    for (r, e) in &data {
        ctx.outputs.push(format!("{}/{}.hea", e.patient_id, r.name()));
    }
    info!("wrote {} synthetic records", data.len());
    Ok(())
}

fn cmd_train(ctx: &mut Ctx) -> Result<()> {
    let s = ctx.settings.clone();
    let preset = s.preset()?;
    let spec = s.model_spec(&preset)?;
    let cfg = s.train_config()?;
    let fold: usize = s.parse("fold")?;
    let (root, _, sel) = load_selection(&s, &preset)?;
    let source = DirSource {
        root,
        channels: preset.channels,
    };
    let ensemble = train_fold(&sel, fold, &spec, &cfg, &source)?;
    let dir = format!("fold{fold}");
    ensemble.save(&ctx.out.join(&dir), "model")?;
    let mut log = String::from("member,epoch,loss\n");
    for (m, model) in ensemble.members.iter().enumerate() {
        ctx.outputs.push(format!("{dir}/model_member{m}.ckpt"));
        for (e, l) in model.epoch_losses.iter().enumerate() {
            log.push_str(&format!("{m},{e},{l:.9}\n"));
        }
    }
    ctx.write(&format!("{dir}/train_log.csv"), log)
}

fn cmd_crossval(ctx: &mut Ctx) -> Result<()> {
    let s = ctx.settings.clone();
    let preset = s.preset()?;
    let spec = s.model_spec(&preset)?;
    let cfg = s.train_config()?;
    let (root, entries, _) = load_selection(&s, &preset)?;
    let source = DirSource {
        root,
        channels: preset.channels,
    };
    let save = s.parse::<bool>("save_checkpoints")?;
    let ckpt_root = ctx.out.join("checkpoints");
    let hook = move |fold: usize, e: &Ensemble| e.save(&ckpt_root.join(format!("fold{fold}")), "model");
    let report = run_crossval(&preset, &entries, &spec, &cfg, &source, if save { Some(&hook) } else { None })?;
    ctx.write("report.csv", report.to_csv()?)?;
    ctx.write("predictions.csv", report.predictions_csv()?)?;
    ctx.write("summary.txt", report.summary())?;
    info!("{}", report.summary());
    Ok(())
}

fn cmd_evaluate(ctx: &mut Ctx) -> Result<()> {
    let s = ctx.settings.clone();
    let preset = s.preset()?;
    let cfg = s.train_config()?;
    let ensemble = Ensemble::load(&models_dir(&s)?, "model")?;
    if ensemble.spec().channels != preset.channels.len() {
        return Err(Error::Config("saved models do not match the channel set".into()));
    }
    let (root, _, sel) = load_selection(&s, &preset)?;
    let source = DirSource {
        root,
        channels: preset.channels,
    };
    let fold: Option<usize> = s.opt("fold").map(|_| s.parse("fold")).transpose()?;
    let wanted = s.list("records");
    let targets: Vec<&RecordEntry> = match fold {
        Some(f) => sel
            .test_entries(f)
            .into_iter()
            .filter(|e| preset.eval_subset.includes(e.label))
            .collect(),
        None if !wanted.is_empty() => sel.entries.iter().filter(|e| wanted.contains(&e.record_id)).collect(),
        None => sel.entries.iter().collect(),
    };
    if targets.is_empty() {
        return Err(Error::Data("no records to evaluate".into()));
    }
    let k = ensemble.spec().num_classes;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["record_id".to_string(), "truth".to_string()];
    header.extend((0..k).map(|c| format!("p{c}")));
    header.extend(["p_mi".to_string(), "predicted".to_string()]);
    w.write_record(&header)?;
    let mut cm = ConfusionMatrix::default();
    for e in targets {
        let record = source.load(e)?;
        let (probs, _) = crate::training::predict_record(&ensemble, &record, &cfg)?;
        let p_mi = sel.label_scheme.mi_probability(&probs);
        cm.record(e.label.is_mi(), p_mi >= 0.5);
        let mut row = vec![e.record_id.clone(), e.label.to_string()];
        row.extend(probs.iter().map(|p| format!("{p:.9}")));
        row.push(format!("{p_mi:.9}"));
        row.push(if p_mi >= 0.5 { "MI" } else { "HC" }.to_string());
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    ctx.write("evaluation.csv", bytes)?;
    if let Some(f) = fold {
        let report = CrossValReport {
            preset: preset.name.clone(),
            model: ensemble.spec().kind.to_string(),
            seed: cfg.seed,
            folds: vec![FoldResult {
                fold: f,
                confusion: cm,
                metrics: compute_metrics(&cm).ok(),
            }],
            predictions: Vec::new(),
        };
        ctx.write(&format!("fold{f}_report.csv"), report.to_csv()?)?;
    }
    Ok(())
}

fn cmd_attribute(ctx: &mut Ctx) -> Result<()> {
    let s = ctx.settings.clone();
    let preset = s.preset()?;
    let cfg = s.train_config()?;
    let ensemble = Ensemble::load(&models_dir(&s)?, "model")?;
    let model = &ensemble.members[0];
    if model.spec.channels != preset.channels.len() {
        return Err(Error::Config("saved models do not match the channel set".into()));
    }
    let method: AttributionMethod = s.get("method").parse()?;
    let ig = IgConfig {
        steps: s.parse("ig_steps")?,
    };
    let target = match s.opt("target") {
        Some(_) => s.parse("target")?,
        None => 1,
    };
    let root = s.data_root()?;
    let entries = scan_data_root(&root)?;
    let wanted = s.list("records");
    if wanted.is_empty() {
        return Err(Error::Config("no records requested; pass --records".into()));
    }
    let map_leads: Vec<String> = preset.channels.leads().iter().map(|l| l.to_string()).collect();
    for id in &wanted {
        let entry = entries
            .iter()
            .find(|e| &e.record_id == id)
            .ok_or_else(|| Error::Data(format!("record {id} not found")))?;
        let full = crate::dataset::load_record(&root, entry)?;
        let model_input = select_channels(&full, preset.channels)?;
        // The explained window is the first evaluation window of the record.
        let windows = eval_windows(&model_input, &cfg, model.spec.input_domain)?;
        let shape = windows.shape().to_vec();
        let per = shape[1] * shape[2];
        let input = Tensor::new([shape[1], shape[2]], windows.data()[..per].to_vec())?;
        let map = attribute(model, &input, target, method, &ig)?;

        let display = select_channels(&full, ChannelSet::All15).unwrap_or_else(|_| model_input.clone());
        let display_names: Vec<String> = display.leads().iter().map(|l| l.map_or("?".into(), |l| l.to_string())).collect();
        let fig_window = if model.spec.input_domain == InputDomain::Time {
            let offset = first_eval_offset(&model_input, &cfg)?;
            let len = cfg.window_config().window_samples(display.sampling_rate());
            downsample(&extract_window(&display, offset, len)?, cfg.target_length)?
        } else {
            input.clone()
        };
        let (fig_names, fig_window) = if fig_window.shape()[1] == display_names.len() {
            (display_names, fig_window)
        } else {
            (map_leads.clone(), input.clone())
        };
        let svg_rel = format!("attribution/{id}.svg");
        render_figure(&fig_window, &fig_names, &map, &map_leads, &ctx.out.join(&svg_rel))?;
        ctx.outputs.push(svg_rel);
        ctx.write(&format!("attribution/{id}_scores.csv"), scores_csv(&map, &map_leads)?)?;
        let probs = aggregate_windows(&crate::models::predict_tensor(model, &windows)?);
        info!("{id}: class probabilities {probs:?}");
    }
    Ok(())
}

/// Start offset of the first evaluation window, replaying its draw.
fn first_eval_offset(record: &crate::wfdb::SignalRecord, cfg: &TrainConfig) -> Result<usize> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::training::eval_seed(record.name(), cfg.seed));
    let len = cfg.window_config().window_samples(record.sampling_rate());
    crate::windowing::sample_offset(record.num_samples(), len, &mut rng)
}

/// Merges fold rows of several report CSVs and recomputes the pooled row.
pub fn merge_reports(csvs: &[String]) -> Result<String> {
    let mut folds: Vec<FoldResult> = Vec::new();
    for text in csvs {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        for row in rd.records() {
            let row = row?;
            if &row[0] == "pooled" {
                continue;
            }
            let n = |i: usize| -> Result<u64> {
                row[i]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad count {:?} in report", &row[i])))
            };
            let cm = ConfusionMatrix {
                tp: n(1)?,
                fn_: n(2)?,
                tn: n(3)?,
                fp: n(4)?,
            };
            let fold = row[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad fold {:?} in report", &row[0])))?;
            if folds.iter().any(|f| f.fold == fold) {
                return Err(Error::Format(format!("fold {fold} appears twice")));
            }
            folds.push(FoldResult {
                fold,
                confusion: cm,
                metrics: compute_metrics(&cm).ok(),
            });
        }
    }
    folds.sort_by_key(|f| f.fold);
    CrossValReport {
        preset: String::new(),
        model: String::new(),
        seed: 0,
        folds,
        predictions: Vec::new(),
    }
    .to_csv()
}

fn cmd_report(ctx: &mut Ctx) -> Result<()> {
    let inputs = ctx.settings.list("inputs");
    if inputs.is_empty() {
        return Err(Error::Config("no report inputs; pass --inputs".into()));
    }
    let texts = inputs
        .iter()
        .map(|p| fs::read_to_string(p).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    ctx.write("report.csv", merge_reports(&texts)?)
}

/// Runs `command` with resolved settings and writes the run manifest.
pub fn execute(command: &str, settings: Settings) -> Result<RunManifest> {
    let out = settings.out_dir();
    fs::create_dir_all(&out)?;
    let checksum = match command {
        "synth" | "report" => "none".to_string(),
        _ => data_checksum(&settings.data_root()?)?,
    };
    let mut ctx = Ctx {
        settings: settings.clone(),
        out: out.clone(),
        outputs: Vec::new(),
    };
    match command {
        "ingest" => cmd_ingest(&mut ctx)?,
        "synth" => cmd_synth(&mut ctx)?,
        "train" => cmd_train(&mut ctx)?,
        "crossval" => cmd_crossval(&mut ctx)?,
        "evaluate" => cmd_evaluate(&mut ctx)?,
        "attribute" => cmd_attribute(&mut ctx)?,
        "report" => cmd_report(&mut ctx)?,
        other => return Err(Error::Config(format!("unknown command {other:?}"))),
    }
    let manifest = RunManifest {
        command: command.to_string(),
        tool_version: TOOL_VERSION.to_string(),
        data_checksum: checksum,
        settings,
        outputs: ctx.outputs,
    };
    fs::write(out.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(manifest)
}

/// Re-executes a recorded run. The output directory may be overridden;
/// the data must match the recorded checksum.
pub fn replay(manifest_path: &Path, out_dir: Option<&Path>) -> Result<RunManifest> {
    let recorded = RunManifest::parse(&fs::read_to_string(manifest_path)?)?;
    if recorded.tool_version != TOOL_VERSION {
        return Err(Error::Config(format!(
            "manifest written by version {}, this is {TOOL_VERSION}",
            recorded.tool_version
        )));
    }
    let mut settings = recorded.settings.clone();
    if let Some(o) = out_dir {
        settings.set("out_dir", o.display())?;
    }
    if recorded.data_checksum != "none" {
        let now = data_checksum(&settings.data_root()?)?;
        if now != recorded.data_checksum {
            return Err(Error::Data(format!(
                "data checksum {now} differs from the recorded {}",
                recorded.data_checksum
            )));
        }
    }
    execute(&recorded.command, settings)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Command::Replay { manifest } = &cli.command {
        replay(manifest, cli.global.out_dir.as_deref())?;
        return Ok(());
    }
    let settings = resolve_settings(&cli.global, &cli.command)?;
    execute(cli.command.name(), settings)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "# comment\nmodel = resnet\nseed = 3\nepochs = 2\n").unwrap();
        let global = GlobalArgs {
            config: Some(cfg),
            seed: Some(9),
            ..GlobalArgs::default()
        };
        let s = resolve_settings(&global, &Command::Crossval).unwrap();
        assert_eq!(s.get("model"), "resnet");
        assert_eq!(s.get("seed"), "9");
        assert_eq!(s.get("epochs"), "2");
    }

    #[test]
    fn unknown_key_rejected() {
        let mut s = Settings::default();
        assert!(matches!(s.apply_text("colour = red\n"), Err(Error::Config(_))));
    }

    #[test]
    fn channel_override_sets_input_width() {
        let mut s = Settings::default();
        s.set("channels", "frank").unwrap();
        let preset = s.preset().unwrap();
        assert_eq!(s.model_spec(&preset).unwrap().channels, 3);
    }

    #[test]
    fn manifest_roundtrip() {
        let mut settings = Settings::default();
        settings.set("preset", "table6_limb").unwrap();
        let m = RunManifest {
            command: "crossval".into(),
            tool_version: TOOL_VERSION.into(),
            data_checksum: "sha256:00".into(),
            settings,
            outputs: vec!["report.csv".into(), "summary.txt".into()],
        };
        assert_eq!(RunManifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn merge_recomputes_pooled() {
        let a = "fold,TP,FN,TN,FP,sens,spec,prec,J\n0,4,1,5,0,x,x,x,x\npooled,4,1,5,0,x,x,x,x\n".to_string();
        let b = "fold,TP,FN,TN,FP,sens,spec,prec,J\n1,3,2,4,1,x,x,x,x\n".to_string();
        let merged = merge_reports(&[b, a]).unwrap();
        let lines: Vec<&str> = merged.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,4,1,5,0,"));
        assert!(lines[3].starts_with("pooled,7,3,9,1,0.700000,0.900000,0.875000,0.600000"));
    }
}
