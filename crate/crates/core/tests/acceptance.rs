//! One test per acceptance criterion; each prints a single
//! `ACCEPTANCE <n> PASS|FAIL|SKIP` line to stderr.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{fd_check, randn, report_line, spread, synthetic};
use ecgforge::attribution::{
    epsilon_lrp, grad_x_input, integrated_gradients, target_score, IgConfig, LRP_EPSILON,
};
use ecgforge::autodiff::{BatchNormStats, Graph, LstmWeights, Mode, Tensor, Var};
use ecgforge::dataset::{
    assign_folds, benchmark_preset, make_sampling_plan, PRESET_NAMES, scan_data_root, select_all_of_group, DatasetSelection,
    Group, RecordEntry,
};
use ecgforge::models::{Layer, ModelKind, ModelSpec, Sequential, TrainedModel};
use ecgforge::synth::{export, generate, SynthConfig, GAIN};
use ecgforge::training::{
    compute_metrics, run_crossval, spec_for_preset, train_model, youden_j, ConfusionMatrix, DirSource,
    TrainConfig, TrainExample,
};
use ecgforge::wfdb::{derive_limb_leads, read_record, ChannelSet, LeadId, SignalRecord};
use ecgforge::windowing::{extract_window, featurize, fft_in_place, padded_spectrum, FftConfig, InputDomain};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: usize, what: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    report_line(&format!("ACCEPTANCE {n} {tag} {what}: {detail}"));
}

// ------------------------------------------------------------ gradients

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

const OPS: [&str; 24] = [
    "conv1d",
    "max_pool2",
    "global_avg_pool",
    "elu",
    "relu",
    "sigmoid",
    "tanh",
    "scale",
    "add",
    "mul",
    "linear",
    "linear_no_bias",
    "batch_norm_train",
    "batch_norm_eval",
    "dropout",
    "softmax",
    "cross_entropy",
    "mse",
    "reshape",
    "slice_time",
    "narrow",
    "stack_time",
    "lstm_cell",
    "lstm_step",
];

fn op_case(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Build) {
    let b = rng.random_range(1..=3);
    let l = rng.random_range(2..=9);
    let c = rng.random_range(1..=4);
    match name {
        "conv1d" => {
            let k = [1, 3, 5][rng.random_range(0..3)];
            let cout = rng.random_range(1..=4);
            let ins = vec![randn(rng, &[b, l, c]), randn(rng, &[k, c, cout]), randn(rng, &[cout])];
            (ins, Box::new(|g, v| g.conv1d(v[0], v[1], v[2]).unwrap()))
        }
        "max_pool2" => (vec![spread(rng, &[b, l, c])], Box::new(|g, v| g.max_pool2(v[0]).unwrap())),
        "global_avg_pool" => (vec![randn(rng, &[b, l, c])], Box::new(|g, v| g.global_avg_pool(v[0]).unwrap())),
        "elu" => (vec![spread(rng, &[b, l, c])], Box::new(|g, v| g.elu(v[0]))),
        "relu" => (vec![spread(rng, &[b, l, c])], Box::new(|g, v| g.relu(v[0]))),
        "sigmoid" => (vec![randn(rng, &[b, l, c])], Box::new(|g, v| g.sigmoid(v[0]))),
        "tanh" => (vec![randn(rng, &[b, l, c])], Box::new(|g, v| g.tanh(v[0]))),
        "scale" => {
            let f = rng.random_range(-3.0..3.0);
            (vec![randn(rng, &[b, l, c])], Box::new(move |g, v| g.scale(v[0], f)))
        }
        "add" => (
            vec![randn(rng, &[b, l, c]), randn(rng, &[b, l, c])],
            Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
        ),
        "mul" => (
            vec![randn(rng, &[b, l, c]), randn(rng, &[b, l, c])],
            Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
        ),
        "linear" => {
            let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=5));
            let ins = vec![randn(rng, &[b, n]), randn(rng, &[n, m]), randn(rng, &[m])];
            (ins, Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap()))
        }
        "linear_no_bias" => {
            let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=5));
            let ins = vec![randn(rng, &[b, n]), randn(rng, &[n, m])];
            (ins, Box::new(|g, v| g.linear(v[0], v[1], None).unwrap()))
        }
        "batch_norm_train" => {
            let b = b + 1;
            let ins = vec![randn(rng, &[b, l, c]), randn(rng, &[c]), randn(rng, &[c])];
            let build: Build = Box::new(move |g, v| {
                let mut stats = BatchNormStats::new(c);
                g.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train).unwrap()
            });
            (ins, build)
        }
        "batch_norm_eval" => {
            let mut stats = BatchNormStats::new(c);
            for ch in 0..c {
                stats.mean[ch] = rng.random_range(-1.0..1.0);
                stats.var[ch] = rng.random_range(0.2..2.0);
            }
            let ins = vec![randn(rng, &[b, l, c]), randn(rng, &[c]), randn(rng, &[c])];
            let build: Build = Box::new(move |g, v| {
                let mut s = stats.clone();
                g.batch_norm(v[0], v[1], v[2], &mut s, Mode::Eval).unwrap()
            });
            (ins, build)
        }
        "dropout" => {
            let seed = rng.random::<u64>();
            let build: Build = Box::new(move |g, v| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                g.dropout(v[0], 0.5, Mode::Train, &mut r).unwrap()
            });
            (vec![randn(rng, &[b, l, c])], build)
        }
        "softmax" => (vec![randn(rng, &[b, c + 1])], Box::new(|g, v| g.softmax(v[0]).unwrap())),
        "cross_entropy" => {
            let k = c + 1;
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            (
                vec![randn(rng, &[b, k])],
                Box::new(move |g, v| g.cross_entropy(v[0], &labels).unwrap()),
            )
        }
        "mse" => {
            let target = randn(rng, &[b, l]);
            (vec![randn(rng, &[b, l])], Box::new(move |g, v| g.mse(v[0], &target).unwrap()))
        }
        "reshape" => (
            vec![randn(rng, &[b, l, c])],
            Box::new(move |g, v| g.reshape(v[0], &[b, l * c]).unwrap()),
        ),
        "slice_time" => {
            let t = rng.random_range(0..l);
            (vec![randn(rng, &[b, l, c])], Box::new(move |g, v| g.slice_time(v[0], t).unwrap()))
        }
        "narrow" => {
            let n = l;
            let start = rng.random_range(0..n);
            let width = rng.random_range(1..=n - start);
            (vec![randn(rng, &[b, n])], Box::new(move |g, v| g.narrow(v[0], start, width).unwrap()))
        }
        "stack_time" => {
            let parts = rng.random_range(1..=4);
            let ins = (0..parts).map(|_| randn(rng, &[b, c])).collect();
            (ins, Box::new(|g, v| g.stack_time(v).unwrap()))
        }
        "lstm_cell" => {
            let h = rng.random_range(1..=3);
            let ins = vec![randn(rng, &[b, 4 * h]), randn(rng, &[b, 2 * h]), randn(rng, &[h, 4 * h])];
            (ins, Box::new(|g, v| g.lstm_cell(v[0], v[1], v[2]).unwrap()))
        }
        "lstm_step" => {
            let h = rng.random_range(1..=3);
            let ins = vec![
                randn(rng, &[b, c]),
                randn(rng, &[b, 2 * h]),
                randn(rng, &[c, 4 * h]),
                randn(rng, &[h, 4 * h]),
                randn(rng, &[4 * h]),
            ];
            let build: Build = Box::new(|g, v| {
                let w = LstmWeights {
                    wx: v[2],
                    wh: v[3],
                    b: v[4],
                };
                g.lstm_step(v[0], v[1], &w).unwrap()
            });
            (ins, build)
        }
        other => panic!("no case for {other}"),
    }
}

#[test]
fn criterion_1_gradient_suite() {
    const TRIALS: usize = 20;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for name in OPS {
        let mut w: f64 = 0.0;
        for _ in 0..TRIALS {
            let (inputs, build) = op_case(name, &mut rng);
            w = w.max(fd_check(&mut rng, inputs, &*build));
        }
        worst.push((name, w));
    }
    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<String> = worst
        .iter()
        .filter(|(_, e)| !(*e < TOL))
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    let max_err = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let pass = failing.is_empty() && secs < 120.0;
    verdict(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} ops x {TRIALS} shapes, max rel err {max_err:.2e}, {secs:.1} s{}",
            OPS.len(),
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(" ")) }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------- attribution

fn random_relu_net(rng: &mut ChaCha8Rng, len: usize, ch: usize, flatten_head: bool) -> Sequential {
    let hidden = 6;
    let tensor = |rng: &mut ChaCha8Rng, shape: &[usize], s: f64| {
        let t = randn(rng, shape);
        let data = t.data().iter().map(|v| v * s).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    };
    let mut layers = vec![
        Layer::BatchNorm {
            gamma: (0..ch).map(|_| rng.random_range(0.5..1.5)).collect(),
            beta: (0..ch).map(|_| rng.random_range(-0.2..0.2)).collect(),
            mean: (0..ch).map(|_| rng.random_range(-0.2..0.2)).collect(),
            var: (0..ch).map(|_| rng.random_range(0.5..2.0)).collect(),
        },
        Layer::Conv1d {
            w: tensor(rng, &[5, ch, hidden], 0.4),
            b: tensor(rng, &[hidden], 0.1),
        },
        Layer::Relu,
        Layer::MaxPool2,
        Layer::Conv1d {
            w: tensor(rng, &[3, hidden, hidden], 0.3),
            b: tensor(rng, &[hidden], 0.1),
        },
        Layer::Relu,
    ];
    if flatten_head {
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense {
            w: tensor(rng, &[len / 2 * hidden, 2], 0.2),
            b: tensor(rng, &[2], 0.1),
        });
    } else {
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Dense {
            w: tensor(rng, &[hidden, 2], 0.5),
            b: tensor(rng, &[2], 0.1),
        });
    }
    Sequential {
        input_length: len,
        channels: ch,
        layers,
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A briefly trained small FCN and a few of its input windows.
fn trained_fcn() -> (TrainedModel, Vec<Tensor>) {
    let synth = SynthConfig {
        patients_per_class: 8,
        channels: ChannelSet::EightNonredundant,
        seed: 3,
        ..SynthConfig::default()
    };
    let data = generate(&synth).unwrap();
    let mut spec = ModelSpec::new(ModelKind::Fcn, InputDomain::Time, 8, 2);
    spec.filters = 16;
    let cfg = TrainConfig {
        epochs: 4,
        ensemble_size: 1,
        ..TrainConfig::default()
    };
    let examples: Vec<TrainExample> = data
        .iter()
        .map(|(r, e)| TrainExample {
            record: r,
            class: usize::from(e.label.is_mi()),
            multiplicity: 1,
        })
        .collect();
    let model = train_model(&spec, &cfg, &examples, 11).unwrap();
    let len = cfg.window_config().window_samples(1000.0);
    let windows = data
        .iter()
        .step_by(4)
        .map(|(r, _)| featurize(&extract_window(r, 500, len).unwrap(), 192, InputDomain::Time).unwrap())
        .collect();
    (model, windows)
}

#[test]
fn criterion_2_attribution_equivalences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    // ReLU-only networks: gradient times input against relevance propagation.
    // The identity is that of the eps -> 0 rule; the stabilizer itself biases
    // each relevance by a factor z / (z + eps).
    let mut relu_diff: f64 = 0.0;
    let mut relu_diff_default_eps: f64 = 0.0;
    for trial in 0..12 {
        let (len, ch) = (rng.random_range(8..=24), rng.random_range(1..=4));
        let net = random_relu_net(&mut rng, len, ch, trial % 2 == 1);
        let x = randn(&mut rng, &[len, ch]);
        for target in 0..2 {
            let gx = grad_x_input(&net, &x, target).unwrap();
            let lrp = epsilon_lrp(&net, &x, target, 0.0).unwrap();
            relu_diff = relu_diff.max(max_abs_diff(&gx.scores, &lrp.scores));
            let lrp_default = epsilon_lrp(&net, &x, target, LRP_EPSILON).unwrap();
            relu_diff_default_eps = relu_diff_default_eps.max(max_abs_diff(&gx.scores, &lrp_default.scores));
        }
    }
    let relu_ok = relu_diff < 1e-6;

    // Completeness of integrated gradients on a trained FCN, zero baseline.
    let (model, windows) = trained_fcn();
    let ig = IgConfig { steps: 256 };
    let mut completeness: f64 = 0.0;
    for w in &windows {
        let zero = Tensor::zeros(w.shape().to_vec());
        for target in 0..2 {
            let map = integrated_gradients(&model, w, target, &ig).unwrap();
            let delta = target_score(&model, w, target).unwrap() - target_score(&model, &zero, target).unwrap();
            completeness = completeness.max((map.sum() - delta).abs() / delta.abs());
        }
    }
    let ig_ok = completeness < 0.01;

    // Linear model without bias: all three maps coincide.
    let mut linear_diff: f64 = 0.0;
    let mut linear_diff_default_eps: f64 = 0.0;
    for _ in 0..20 {
        let (len, ch, k) = (rng.random_range(2..=30), rng.random_range(1..=4), rng.random_range(1..=3));
        let net = Sequential {
            input_length: len,
            channels: ch,
            layers: vec![
                Layer::Flatten,
                Layer::Dense {
                    w: randn(&mut rng, &[len * ch, k]),
                    b: Tensor::zeros(vec![k]),
                },
            ],
        };
        let x = randn(&mut rng, &[len, ch]);
        let target = rng.random_range(0..k);
        let gx = grad_x_input(&net, &x, target).unwrap();
        let igm = integrated_gradients(&net, &x, target, &ig).unwrap();
        let lrp = epsilon_lrp(&net, &x, target, 0.0).unwrap();
        let lrp_default = epsilon_lrp(&net, &x, target, LRP_EPSILON).unwrap();
        linear_diff = linear_diff
            .max(max_abs_diff(&gx.scores, &igm.scores))
            .max(max_abs_diff(&gx.scores, &lrp.scores))
            .max(max_abs_diff(&igm.scores, &lrp.scores));
        linear_diff_default_eps = linear_diff_default_eps.max(max_abs_diff(&gx.scores, &lrp_default.scores));
    }
    let linear_ok = linear_diff < 1e-10;

    let pass = relu_ok && ig_ok && linear_ok;
    verdict(
        2,
        "attribution equivalences",
        pass,
        &format!(
            "relu grad*input vs lrp {relu_diff:.2e} (<1e-6); ig completeness {:.3}% (<1%); \
             linear maps {linear_diff:.2e} (<1e-10); relevance rule at eps->0, stabilizer bias at eps=1e-6: \
             relu {relu_diff_default_eps:.2e}, linear {linear_diff_default_eps:.2e}",
            completeness * 100.0
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ fft

fn direct_dft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(j, v)| {
                    let angle = -2.0 * std::f64::consts::PI * ((j * k) % n) as f64 / n as f64;
                    v * Complex64::from_polar(1.0, angle)
                })
                .sum()
        })
        .collect()
}

#[test]
fn criterion_3_fft() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = FftConfig::for_length(192);
    let sizes_ok = cfg.n_fft == 256 && cfg.n_components == 129;
    let feats = featurize(&randn(&mut rng, &[4000, 3]), 192, InputDomain::Frequency).unwrap();
    let shape_ok = feats.shape() == [129, 3];

    let mut max_err: f64 = 0.0;
    let mut parseval: f64 = 0.0;
    for trial in 0..40 {
        let spectrum;
        let signal: Vec<Complex64>;
        if trial < 20 {
            let real: Vec<f64> = (0..192).map(|_| rng.random_range(-3.0..3.0)).collect();
            spectrum = padded_spectrum(&real, 256);
            signal = real
                .iter()
                .map(|&v| Complex64::new(v, 0.0))
                .chain(std::iter::repeat_n(Complex64::new(0.0, 0.0), 64))
                .collect();
        } else {
            let n = 1usize << rng.random_range(0..=10);
            signal = (0..n)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let mut buf = signal.clone();
            fft_in_place(&mut buf);
            spectrum = buf;
        }
        let oracle = direct_dft(&signal);
        for (a, b) in spectrum.iter().zip(&oracle) {
            max_err = max_err.max((a - b).norm());
        }
        let time: f64 = signal.iter().map(|v| v.norm_sqr()).sum::<f64>() * signal.len() as f64;
        let freq: f64 = spectrum.iter().map(|v| v.norm_sqr()).sum();
        parseval = parseval.max((time - freq).abs() / time);
    }
    let pass = sizes_ok && shape_ok && max_err < 1e-9 && parseval < 1e-9;
    verdict(
        3,
        "fft",
        pass,
        &format!(
            "d=192 -> n_fft={} with {} bins, features {:?}; max |fft-dft| {max_err:.2e} (<1e-9); parseval rel {parseval:.2e} (<1e-9)",
            cfg.n_fft,
            cfg.n_components,
            feats.shape()
        ),
    );
    assert!(pass);
}

// -------------------------------------------------------------- metrics

#[test]
fn criterion_4_metric_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let cm = ConfusionMatrix {
            tp: rng.random_range(0..500),
            fn_: rng.random_range(0..500),
            tn: rng.random_range(0..500),
            fp: rng.random_range(0..500),
        };
        if cm.tp + cm.fn_ == 0 || cm.tn + cm.fp == 0 {
            assert!(compute_metrics(&cm).is_err());
            continue;
        }
        let m = compute_metrics(&cm).unwrap();
        let sens = cm.tp as f64 / (cm.tp + cm.fn_) as f64;
        let spec = cm.tn as f64 / (cm.tn + cm.fp) as f64;
        if m.sensitivity != sens || m.specificity != spec || m.youden_j != sens + spec - 1.0 {
            mismatches += 1;
        }
    }
    // Reported FCN row: sensitivity 0.933, specificity 0.897, J 0.827.
    let j = youden_j(0.933, 0.897);
    let row_gap = (j - 0.827).abs();
    let pass = mismatches == 0 && row_gap <= 0.005;
    verdict(
        4,
        "metric identities",
        pass,
        &format!("{mismatches} mismatches in 10^4 matrices; reported FCN row J {j:.3} vs 0.827 (gap {row_gap:.3} <= 0.005)"),
    );
    assert!(pass);
}

// -------------------------------------------------------------- leakage

/// Patients found on both sides of a fold, computed from the raw fold labels.
fn leaks(sel: &DatasetSelection) -> usize {
    let mut folds_of: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for e in &sel.entries {
        folds_of
            .entry(e.patient_id.as_str())
            .or_default()
            .insert(sel.fold(&e.record_id).expect("assigned"));
    }
    let split = folds_of.values().filter(|f| f.len() > 1).count();
    let mut both = 0;
    for f in 0..sel.num_folds() {
        let train: BTreeSet<&str> = sel.train_entries(f).iter().map(|e| e.patient_id.as_str()).collect();
        let test: BTreeSet<&str> = sel.test_entries(f).iter().map(|e| e.patient_id.as_str()).collect();
        both += train.intersection(&test).count();
    }
    split + both
}

fn multiplicity_ok(sel: &DatasetSelection) -> bool {
    let plan = make_sampling_plan(sel);
    sel.entries.iter().all(|e| {
        let want = if e.label.group() == Group::Hc { 2 } else { 1 };
        plan.multiplicity(&e.record_id) == want
    })
}

#[test]
fn criterion_5_leakage_audit() {
    let mut assignments = 0;
    let mut leaked = 0;
    let mut mult_ok = true;
    for seed in 0..4u64 {
        let cfg = SynthConfig {
            patients_per_class: 24,
            records_per_patient: 3,
            duration_seconds: 4.5,
            channels: ChannelSet::Single(LeadId::II),
            seed,
            ..SynthConfig::default()
        };
        let entries: Vec<RecordEntry> = generate(&cfg).unwrap().into_iter().map(|(_, e)| e).collect();
        for preset in PRESET_NAMES {
            let p = benchmark_preset(preset).unwrap();
            for k in [2, 5, 10] {
                let sel = assign_folds(&p.select(&entries).unwrap(), k, seed).unwrap();
                leaked += leaks(&sel);
                mult_ok &= multiplicity_ok(&sel);
                assignments += 1;
            }
        }
        let sel = assign_folds(&select_all_of_group(&entries, Group::Imi).unwrap(), 10, seed).unwrap();
        leaked += leaks(&sel);
        mult_ok &= multiplicity_ok(&sel);
        assignments += 1;
    }
    let pass = leaked == 0 && mult_ok;
    verdict(
        5,
        "leakage audit",
        pass,
        &format!("{assignments} synthetic fold assignments, {leaked} leaked patients; HC multiplicity 2: {mult_ok}"),
    );
    assert!(pass);
}

// ------------------------------------------------------------- learning

#[test]
fn criterion_6_desk_scale_learning() {
    let start = Instant::now();
    let synth = SynthConfig {
        patients_per_class: 40,
        st_offset_mv: 0.2,
        noise_std_mv: 0.05,
        channels: ChannelSet::EightNonredundant,
        ..SynthConfig::default()
    };
    let (entries, source) = synthetic(&synth, ChannelSet::EightNonredundant);
    let preset = benchmark_preset("table3_default").unwrap();
    let mut spec = spec_for_preset(ModelKind::Fcn, InputDomain::Time, &preset);
    spec.filters = 32;
    let cfg = TrainConfig {
        epochs: 20,
        ensemble_size: 1,
        num_folds: 10,
        ..TrainConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let report = pool
        .install(|| run_crossval(&preset, &entries, &spec, &cfg, &source, None))
        .unwrap();
    let m = report.pooled_metrics().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = m.youden_j >= 0.9 && secs < 900.0;
    verdict(
        6,
        "desk-scale learning",
        pass,
        &format!(
            "single FCN ({} filters), 10-fold, {} epochs, one thread: pooled J {:.3} (>=0.9), sens {:.3}, spec {:.3}, {secs:.0} s (<900 s)",
            spec.filters, cfg.epochs, m.youden_j, m.sensitivity, m.specificity
        ),
    );
    assert!(pass);
}

// --------------------------------------------------------- limb leads

fn only_leads(record: &SignalRecord, leads: &[LeadId]) -> SignalRecord {
    let idx: Vec<usize> = leads.iter().map(|l| record.header.lead_index(*l).unwrap()).collect();
    let mut header = record.header.clone();
    header.signals = idx.iter().map(|&i| record.header.signals[i].clone()).collect();
    let cols: Vec<Vec<f64>> = idx.iter().map(|&i| record.channel(i)).collect();
    SignalRecord::from_channels(header, &cols).unwrap()
}

#[test]
fn criterion_7_lead_derivation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        patients_per_class: 4,
        seed: 7,
        ..SynthConfig::default()
    };
    let data = generate(&cfg).unwrap();
    export(dir.path(), &data).unwrap();
    let step = 1.0 / GAIN;
    let mut worst_steps: f64 = 0.0;
    let mut einthoven_exact = true;
    let mut records = 0;
    for (_, entry) in &data {
        let stored = read_record(&dir.path().join(&entry.patient_id), &entry.record_id).unwrap();
        let base = only_leads(&stored, &[LeadId::I, LeadId::II]);
        let derived = derive_limb_leads(&base).unwrap();
        let (i, ii) = (stored.channel(0), stored.channel(1));
        for lead in [LeadId::III, LeadId::AVR, LeadId::AVL, LeadId::AVF] {
            let want = stored.channel(stored.header.lead_index(lead).unwrap());
            let got = derived.channel(derived.header.lead_index(lead).unwrap());
            for (a, b) in want.iter().zip(&got) {
                worst_steps = worst_steps.max((a - b).abs() / step);
            }
            if lead == LeadId::III {
                einthoven_exact &= got.iter().enumerate().all(|(t, v)| *v == ii[t] - i[t]);
            }
        }
        records += 1;
    }
    let pass = worst_steps <= 2.0 + 1e-9 && einthoven_exact;
    verdict(
        7,
        "lead derivation",
        pass,
        &format!(
            "{records} stored records: max derived-vs-stored gap {worst_steps:.2} quantization steps (<=2); III = II - I exact: {einthoven_exact}"
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------------ ptb

#[test]
fn criterion_8_ptb_database() {
    let root = match std::env::var_os("ECGFORGE_DATA") {
        Some(r) if Path::new(&r).is_dir() => std::path::PathBuf::from(r),
        _ => {
            report_line("ACCEPTANCE 8 SKIP ptb database: ECGFORGE_DATA is not set, dataset-dependent checks not run");
            return;
        }
    };
    let entries = scan_data_root(&root).unwrap();
    let preset = benchmark_preset("table3_default").unwrap();
    let sel = preset.select(&entries).unwrap();
    let (mi, hc) = (sel.count_group(Group::Ami) + sel.count_group(Group::Imi), sel.count_group(Group::Hc));
    let (ami, imi) = (sel.count_patients_in_group(Group::Ami), sel.count_patients_in_group(Group::Imi));
    let counts_ok = mi == 127 && hc == 80 && ami == 62 && imi == 65;
    let folds = assign_folds(&sel, 10, 0).unwrap();
    let leak_free = leaks(&folds) == 0;

    let spec = spec_for_preset(ModelKind::Fcn, InputDomain::Time, &preset);
    let cfg = TrainConfig::default();
    let source = DirSource {
        root: root.clone(),
        channels: preset.channels,
    };
    let report = run_crossval(&preset, &entries, &spec, &cfg, &source, None).unwrap();
    let j = report.pooled_metrics().map(|m| m.youden_j).unwrap_or(f64::NAN);
    let pass = counts_ok && leak_free && j.is_finite();
    verdict(
        8,
        "ptb database",
        pass,
        &format!(
            "{mi} MI / {hc} HC records (127/80), {ami} aMI / {imi} iMI patients (62/65); table3_default pooled J {j:.3} \
             (reference neighborhood 0.70-0.90, not gated)"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------- determinism

fn ecgforge(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_ecgforge"))
        .args(args)
        .env_remove("ECGFORGE_DATA")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "ecgforge {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_9_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).display().to_string();
    let data = p("data");
    ecgforge(&["--out-dir", &data, "--seed", "5", "synth", "--patients", "10"]);

    let runs: [(&str, Vec<&str>); 3] = [
        ("ingest", vec!["ingest"]),
        (
            "crossval",
            vec![
                "--set", "epochs=2", "--set", "ensemble_size=2", "--set", "filters=8",
                "--set", "train_windows=2", "--set", "eval_windows=4", "crossval",
            ],
        ),
        (
            "train",
            vec!["--set", "filters=8", "--set", "epochs=1", "--set", "ensemble_size=1", "train"],
        ),
    ];
    let mut compared = 0;
    let mut differing = Vec::new();
    for (name, args) in &runs {
        let first = p(&format!("{name}_a"));
        let mut full = vec!["--data-root", data.as_str(), "--out-dir", first.as_str(), "--seed", "9", "--set", "folds=3"];
        full.extend(args.iter());
        ecgforge(&full);
        let second = p(&format!("{name}_b"));
        let manifest = format!("{first}/run_manifest.txt");
        ecgforge(&["replay", "--manifest", &manifest, "--out-dir", &second]);
        let (a, b) = (csv_files(Path::new(&first)), csv_files(Path::new(&second)));
        assert!(!a.is_empty(), "{name} wrote no CSV output");
        if a != b {
            differing.push(name.to_string());
        }
        compared += a.len();
    }
    let pass = differing.is_empty();
    verdict(
        9,
        "determinism",
        pass,
        &format!(
            "ingest, crossval and train replayed from their run manifests: {compared} CSV files, differing runs: {:?}",
            differing
        ),
    );
    assert!(pass);
}
