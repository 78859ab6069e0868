use std::path::Path;
use std::process::{Command, Output};

use ecgforge::models::ModelSpec;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecgforge"))
        .args(args)
        .env_remove("ECGFORGE_DATA")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "ecgforge {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

const SMALL: [&str; 12] = [
    "--set", "epochs=1", "--set", "filters=4", "--set", "ensemble_size=1", "--set", "train_windows=1", "--set",
    "eval_windows=2", "--set", "batch_size=16",
];

fn synth(dir: &Path, patients: &str) -> String {
    let data = dir.join("data").display().to_string();
    ok(&["--out-dir", &data, "synth", "--patients", patients]);
    data
}

#[test]
fn frank_channels_build_a_three_channel_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "6");
    let out = tmp.path().join("train").display().to_string();
    let mut args = vec!["--data-root", &data, "--out-dir", &out, "--channels", "frank", "--model", "fcn", "--set", "folds=3"];
    args.extend(SMALL);
    args.push("train");
    ok(&args);
    let text = std::fs::read_to_string(tmp.path().join("train/fold0/model_member0.spec")).unwrap();
    let spec = ModelSpec::from_manifest(&text).unwrap();
    assert_eq!(spec.channels, 3);
    assert!(tmp.path().join("train/fold0/model_member0.ckpt").is_file());
}

#[test]
fn crossval_report_has_one_row_per_fold_and_a_pooled_row() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "20");
    let out = tmp.path().join("cv").display().to_string();
    let mut args = vec!["--data-root", &data, "--out-dir", &out, "--preset", "table3_default", "--model", "fcn"];
    args.extend(SMALL);
    args.push("crossval");
    ok(&args);
    let mut rdr = csv::Reader::from_path(tmp.path().join("cv/report.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["fold", "TP", "FN", "TN", "FP", "sens", "spec", "prec", "J"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 11);
    for (i, row) in rows[..10].iter().enumerate() {
        assert_eq!(&row[0], i.to_string().as_str());
    }
    assert_eq!(&rows[10][0], "pooled");
    for col in 1..5 {
        let total: u64 = rows[..10].iter().map(|r| r[col].parse::<u64>().unwrap()).sum();
        assert_eq!(rows[10][col].parse::<u64>().unwrap(), total);
    }
    assert!(tmp.path().join("cv/run_manifest.txt").is_file());
}

#[test]
fn attribute_writes_one_figure_per_record_with_saturated_extremes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "6");
    let train = tmp.path().join("train").display().to_string();
    let mut args = vec!["--data-root", &data, "--out-dir", &train, "--set", "folds=3"];
    args.extend(SMALL);
    args.push("train");
    ok(&args);

    let models = format!("{train}/fold0");
    for method in ["grad_x_input", "epsilon_lrp", "integrated_gradients"] {
        let out = tmp.path().join(method);
        let out_s = out.display().to_string();
        ok(&[
            "--data-root", &data, "--out-dir", &out_s, "--set", "ig_steps=16", "attribute", "--models", &models,
            "--records", "s0000_sy,s0006_sy", "--method", method,
        ]);
        for id in ["s0000_sy", "s0006_sy"] {
            let svg = std::fs::read_to_string(out.join(format!("attribution/{id}.svg"))).unwrap();
            let doc = roxmltree::Document::parse(&svg).unwrap();
            let panels: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("panel")).collect();
            assert_eq!(panels.len(), 15, "all leads are drawn");

            // The largest score in the table is drawn in a saturated color.
            let mut rdr = csv::Reader::from_path(out.join(format!("attribution/{id}_scores.csv"))).unwrap();
            let (mut best_t, mut best_lead, mut best) = (String::new(), String::new(), 0.0f64);
            for row in rdr.records() {
                let row = row.unwrap();
                let v: f64 = row[2].parse().unwrap();
                if v.abs() > best.abs() {
                    (best_t, best_lead, best) = (row[0].to_string(), row[1].to_string(), v);
                }
            }
            let panel = panels.iter().find(|p| p.attribute("data-lead") == Some(best_lead.as_str())).unwrap();
            let rect = panel
                .descendants()
                .find(|n| n.has_tag_name("rect") && n.attribute("data-t") == Some(best_t.as_str()))
                .unwrap();
            let want = if best > 0.0 { "#ff0000" } else { "#0000ff" };
            assert_eq!(rect.attribute("fill"), Some(want), "{method} {id}");
        }
    }
}

#[test]
fn unused_leads_are_drawn_without_background() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "6");
    let train = tmp.path().join("train").display().to_string();
    let mut args = vec!["--data-root", &data, "--out-dir", &train, "--channels", "II", "--set", "folds=3"];
    args.extend(SMALL);
    args.push("train");
    ok(&args);
    let out = tmp.path().join("attr");
    let out_s = out.display().to_string();
    let models = format!("{train}/fold0");
    ok(&["--data-root", &data, "--out-dir", &out_s, "--channels", "II", "attribute", "--models", &models, "--records", "s0001_sy"]);
    let svg = std::fs::read_to_string(out.join("attribution/s0001_sy.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    for panel in doc.descendants().filter(|n| n.attribute("class") == Some("panel")) {
        let colored = panel.descendants().filter(|n| n.attribute("data-t").is_some()).count();
        if panel.attribute("data-lead") == Some("II") {
            assert!(colored > 0);
        } else {
            assert_eq!(colored, 0);
        }
    }
}

#[test]
fn usage_and_data_errors_exit_nonzero() {
    let bogus = run(&["frobnicate"]);
    assert_eq!(bogus.status.code(), Some(2));
    let flag = run(&["--no-such-flag", "ingest"]);
    assert_eq!(flag.status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing").display().to_string();
    let out = tmp.path().join("o").display().to_string();
    let r = run(&["--data-root", &missing, "--out-dir", &out, "ingest"]);
    assert!(!r.status.success());
    assert!(!String::from_utf8_lossy(&r.stderr).trim().is_empty());
}

#[test]
fn config_file_values_yield_to_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "4");
    let cfg = tmp.path().join("run.conf");
    std::fs::write(&cfg, "# settings\nfolds = 2\nseed = 3\nchannels = frank\n").unwrap();
    let out = tmp.path().join("ing").display().to_string();
    ok(&["--data-root", &data, "--out-dir", &out, "--config", &cfg.display().to_string(), "--seed", "4", "ingest"]);
    let manifest = std::fs::read_to_string(tmp.path().join("ing/run_manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l.trim() == "seed = 4"), "{manifest}");
    assert!(manifest.lines().any(|l| l.trim() == "folds = 2"), "{manifest}");
    assert!(manifest.lines().any(|l| l.trim() == "channels = frank"), "{manifest}");
}
