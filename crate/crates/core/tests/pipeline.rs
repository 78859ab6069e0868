mod common;

use common::{fd_check, synthetic};
use ecgforge::attribution::{
    epsilon_lrp, grad_x_input, integrated_gradients, rank_correlation, target_score, IgConfig, LRP_EPSILON,
};
use ecgforge::autodiff::{BatchNormStats, Mode, Tensor};
use ecgforge::dataset::{Group, Localization};
use ecgforge::models::{ModelKind, ModelSpec, TrainedModel};
use ecgforge::synth::{beat_times, export, generate, synth_record, Pathology, SynthConfig};
use ecgforge::training::{train_model, RecordSource, TrainConfig, TrainExample};
use ecgforge::wfdb::{read_record, ChannelSet, LeadId, SignalRecord};
use ecgforge::windowing::{extract_window, featurize, InputDomain};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn examples(data: &[(SignalRecord, ecgforge::dataset::RecordEntry)]) -> Vec<TrainExample<'_>> {
    data.iter()
        .map(|(r, e)| TrainExample {
            record: r,
            class: usize::from(e.label.is_mi()),
            multiplicity: if e.label.group() == Group::Hc { 2 } else { 1 },
        })
        .collect()
}

fn small_fcn() -> ModelSpec {
    let mut spec = ModelSpec::new(ModelKind::Fcn, InputDomain::Time, 8, 2);
    spec.filters = 16;
    spec
}

fn eight_lead_data(patients: usize, seed: u64) -> Vec<(SignalRecord, ecgforge::dataset::RecordEntry)> {
    generate(&SynthConfig {
        patients_per_class: patients,
        channels: ChannelSet::EightNonredundant,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

// ------------------------------------------------------------- synthetic

#[test]
fn st_offset_is_added_exactly_on_affected_leads() {
    let cfg = SynthConfig {
        noise_std_mv: 0.0,
        q_factor: 1.0,
        st_offset_mv: 0.2,
        ..SynthConfig::default()
    };
    let hc = synth_record(&cfg, "a", 3, Pathology::None, 0).unwrap();
    let mi = synth_record(&cfg, "b", 3, Pathology::Infarction(Localization::Anterior), 0).unwrap();
    let v2 = hc.header.lead_index(LeadId::V2).unwrap();
    let v6 = hc.header.lead_index(LeadId::V6).unwrap();
    let diff: Vec<f64> = (0..hc.num_samples()).map(|t| mi.get(t, v2) - hc.get(t, v2)).collect();
    assert!(diff.iter().all(|d| d.abs() < 1e-12 || (d - 0.2).abs() < 1e-12));

    // Raised stretches are whole ST windows of 0.06-0.16 s after each R peak.
    let mut runs = Vec::new();
    let mut t = 0;
    while t < diff.len() {
        if diff[t] > 0.1 {
            let start = t;
            while t < diff.len() && diff[t] > 0.1 {
                t += 1;
            }
            if start > 0 && t < diff.len() {
                runs.push(t - start);
            }
        }
        t += 1;
    }
    assert!(runs.len() >= 4, "{runs:?}");
    assert!(runs.iter().all(|&r| r == 100), "{runs:?}");
    let mean_st_diff: f64 = diff.iter().filter(|d| **d > 0.1).sum::<f64>() / diff.iter().filter(|d| **d > 0.1).count() as f64;
    assert!((mean_st_diff - 0.2).abs() < 1e-12);

    assert!((0..hc.num_samples()).all(|t| mi.get(t, v6) == hc.get(t, v6)));
}

#[test]
fn four_second_window_at_sixty_bpm_holds_three_full_beats() {
    let cfg = SynthConfig {
        heart_rate_bpm: (60.0, 60.0),
        ..SynthConfig::default()
    };
    // P onset to T offset, relative to the R peak.
    let (before, after) = (0.25, 0.40);
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beats = beat_times(&cfg, 1.0, &mut rng);
        let mut start = 0.0;
        while start + 4.0 <= cfg.duration_seconds {
            let full = beats.iter().filter(|&&r| r - before >= start && r + after <= start + 4.0).count();
            assert!(full >= 3, "seed {seed}, window at {start:.2} s has {full} beats");
            start += 0.01;
        }
    }
}

#[test]
fn exported_records_read_back_identically() {
    let cfg = SynthConfig {
        patients_per_class: 2,
        records_per_patient: 2,
        seed: 8,
        ..SynthConfig::default()
    };
    let data = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export(dir.path(), &data).unwrap();
    for (rec, entry) in &data {
        let back = read_record(&dir.path().join(&entry.patient_id), &entry.record_id).unwrap();
        assert_eq!(&back, rec);
    }
}

// -------------------------------------------------------------- training

#[test]
fn training_loss_falls_by_half() {
    let data = eight_lead_data(10, 21);
    let cfg = TrainConfig {
        epochs: 8,
        ..TrainConfig::default()
    };
    let model = train_model(&small_fcn(), &cfg, &examples(&data), 4).unwrap();
    let losses = &model.epoch_losses;
    assert_eq!(losses.len(), 8);
    assert!(losses.last().unwrap() < &(0.5 * losses[0]), "{losses:?}");
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let data = eight_lead_data(2, 1);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let spec = small_fcn();
    let trained = train_model(&spec, &cfg, &examples(&data), 17).unwrap();
    let init = TrainedModel::init(&spec, 17).unwrap();
    assert_eq!(trained.checkpoint_bytes(), init.checkpoint_bytes());
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = eight_lead_data(3, 2);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let mut spec = small_fcn();
    spec.filters = 4;
    let a = train_model(&spec, &cfg, &examples(&data), 9).unwrap();
    let b = train_model(&spec, &cfg, &examples(&data), 9).unwrap();
    let c = train_model(&spec, &cfg, &examples(&data), 10).unwrap();
    assert_eq!(a.checkpoint_bytes(), b.checkpoint_bytes());
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_ne!(a.checkpoint_bytes(), c.checkpoint_bytes());
}

#[test]
fn every_model_family_learns_on_synthetic_data() {
    let data = eight_lead_data(6, 5);
    for kind in [ModelKind::Fcn, ModelKind::Resnet, ModelKind::LstmFinal, ModelKind::LstmJoint] {
        let mut spec = ModelSpec::new(kind, InputDomain::Time, 8, 2);
        spec.filters = 8;
        spec.hidden = 32;
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 16,
            ..TrainConfig::for_model(kind)
        };
        let model = train_model(&spec, &cfg, &examples(&data), 3).unwrap();
        let losses = &model.epoch_losses;
        assert!(losses.iter().all(|l| l.is_finite()), "{kind}");
        let late = losses[9..].iter().sum::<f64>() / 3.0;
        assert!(late < losses[0], "{kind}: {losses:?}");
    }
}

/// Input gradients of whole networks in eval mode against finite differences.
#[test]
fn network_input_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for kind in [ModelKind::Fcn, ModelKind::Resnet, ModelKind::LstmFinal, ModelKind::LstmJoint] {
        let mut spec = ModelSpec::new(kind, InputDomain::Time, 2, 3);
        spec.input_length = 24;
        spec.filters = 4;
        spec.hidden = 5;
        let mut model = TrainedModel::init(&spec, rng.random()).unwrap();
        model.input_norm = BatchNormStats {
            mean: vec![0.1, -0.2],
            var: vec![1.5, 0.7],
            momentum: 0.9,
        };
        let x = common::randn(&mut rng, &[2, 24, 2]);
        let err = fd_check(&mut rng, vec![x], &|g, v| {
            let mut norm = model.input_norm.clone();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            model.forward(g, v[0], Mode::Eval, &mut norm, &mut r).unwrap().logits
        });
        assert!(err < 1e-4, "{kind}: {err:e}");
    }
}

// ----------------------------------------------------------- attribution

#[test]
fn trained_fcn_attributions_are_consistent() {
    let data = eight_lead_data(8, 6);
    let cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let model = train_model(&small_fcn(), &cfg, &examples(&data), 2).unwrap();
    let net = model.as_sequential().unwrap();
    let len = cfg.window_config().window_samples(1000.0);
    let ig = IgConfig::default();
    let zero = Tensor::zeros(vec![192, 8]);
    let mut checked = 0;
    for (rec, _) in data.iter().step_by(3) {
        let w = featurize(&extract_window(rec, 1000, len).unwrap(), 192, InputDomain::Time).unwrap();
        for target in 0..2 {
            let gx = grad_x_input(&model, &w, target).unwrap();
            let lrp = epsilon_lrp(&net, &w, target, LRP_EPSILON).unwrap();
            let rho = rank_correlation(gx.scores.data(), lrp.scores.data());
            assert!(rho > 0.9, "rank correlation {rho}");

            // Relative step-count sensitivity is only meaningful when the
            // score moves away from the baseline.
            let delta = target_score(&model, &w, target).unwrap() - target_score(&model, &zero, target).unwrap();
            if delta.abs() < 0.1 {
                continue;
            }
            checked += 1;
            let coarse = integrated_gradients(&model, &w, target, &ig).unwrap().sum();
            let fine = integrated_gradients(&model, &w, target, &IgConfig { steps: 512 }).unwrap().sum();
            assert!((coarse - fine).abs() <= 0.005 * fine.abs(), "{coarse} vs {fine}");
        }
    }
    assert!(checked >= 4, "{checked} windows checked");
}

#[test]
fn sequential_view_matches_the_model() {
    let mut spec = small_fcn();
    spec.filters = 6;
    let model = TrainedModel::init(&spec, 3).unwrap();
    let net = model.as_sequential().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = common::randn(&mut rng, &[3, 192, 8]);
    let a = model.logits(&batch).unwrap();
    let b = net.logits(&batch).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    let mut resnet = spec.clone();
    resnet.kind = ModelKind::Resnet;
    assert!(TrainedModel::init(&resnet, 3).unwrap().as_sequential().is_err());
}

#[test]
fn memory_source_selects_channels() {
    let cfg = SynthConfig {
        patients_per_class: 2,
        ..SynthConfig::default()
    };
    let (entries, source) = synthetic(&cfg, ChannelSet::Frank);
    for e in &entries {
        let r = source.load(e).unwrap();
        assert_eq!(r.num_channels(), 3);
        assert_eq!(r.header.signals[0].lead(), Some(LeadId::Vx));
    }
}
