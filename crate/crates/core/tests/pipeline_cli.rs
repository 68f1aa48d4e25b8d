use std::path::Path;

use serde_json::Value;
use tftmulti::cli::{run, CliError};
use tftmulti::config::ConfigError;
use tftmulti::metrics::read_predictions;
use tftmulti::trainer::{TrainError, TrainedModel};

const CONFIG: &str = r#"
seed = 5
output_dir = "out"

[data]
past_len = 12
horizon = 6

[synth]
n_encounters = 30
bins = 24
pressor_known_future = true
seed = 5

[model]
hidden_size = 8
num_heads = 2
dropout = 0.1

[train]
max_epochs = 3
batch_size = 8

[baseline]
max_order = 3
granger_lag = 2

[scenario]
max_subjects = 2
"#;

fn tftm(config: &Path, args: &[&str]) -> Result<(), CliError> {
    let mut argv = vec!["tftm".to_string()];
    argv.extend(args.iter().map(|a| a.to_string()));
    argv.push("--config".into());
    argv.push(config.display().to_string());
    run(argv)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_writes_artifacts_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, CONFIG).unwrap();
    for cmd in ["synth", "prepare", "train", "evaluate", "baseline", "importance", "whatif"] {
        tftm(&config, &[cmd]).unwrap_or_else(|e| panic!("{cmd}: {e}"));
    }
    let out = dir.path().join("out");

    let hash = {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(CONFIG.as_bytes()))
    };
    for cmd in ["synth", "prepare", "train", "evaluate", "baseline", "importance", "whatif"] {
        let m = read_json(&out.join(format!("manifest-{cmd}.json")));
        assert_eq!(m["command"], cmd);
        assert_eq!(m["config_sha256"], hash.as_str());
        assert_eq!(m["seed"], 5);
        assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
        for o in m["outputs"].as_array().unwrap() {
            assert!(Path::new(o.as_str().unwrap()).exists(), "{o}");
        }
    }

    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let model = TrainedModel::load(&out.join("model.tftm")).unwrap();
    let best = TrainedModel::load(&out.join("checkpoint-best.tftm")).unwrap();
    assert_eq!(model, best);

    let preds = read_predictions(std::fs::File::open(out.join("predictions.csv")).unwrap()).unwrap();
    assert_eq!(preds.len(), 6 * 6 * 5, "6 test subjects x 6 steps x 5 targets");
    assert!(preds.iter().all(|r| r.q10.is_some() && r.q90.is_some()));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["variables"].as_array().unwrap().len(), 5);

    let var_preds = read_predictions(std::fs::File::open(out.join("var_predictions.csv")).unwrap()).unwrap();
    assert_eq!(var_preds.len(), preds.len());
    assert!(var_preds.iter().all(|r| r.q10.is_none()));
    let granger = std::fs::read_to_string(out.join("granger.csv")).unwrap();
    assert_eq!(granger.lines().count(), 1 + 5 * 4);

    let tsv = std::fs::read_to_string(out.join("importance_static.tsv")).unwrap();
    assert!(tsv.starts_with("feature\tweight\n"));
    assert_eq!(tsv.lines().count(), 3);

    let contrasts = read_json(&out.join("contrasts.json"));
    assert_eq!(contrasts["rows"].as_array().unwrap().len(), 3);
    let whatif: Vec<_> = std::fs::read_dir(out.join("whatif")).unwrap().collect();
    assert_eq!(whatif.len(), 6);
}

#[test]
fn config_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "seed = 1\n[model]\nhidden_size = 8\nheads = 2\n").unwrap();
    match tftm(&config, &["synth"]) {
        Err(CliError::Config(e @ ConfigError::Parse { .. })) => assert!(e.to_string().contains("line 4"), "{e}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn later_stages_need_earlier_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, CONFIG).unwrap();
    assert!(tftm(&config, &["prepare"]).is_err());
    assert!(tftm(&config, &["train"]).is_err());
}

#[test]
fn checkpoints_of_other_versions_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, CONFIG).unwrap();
    for cmd in ["synth", "prepare"] {
        tftm(&config, &[cmd]).unwrap();
    }
    tftm(&config, &["train", "--max-epochs", "1"]).unwrap();
    let path = dir.path().join("out/model.tftm");
    let text = std::fs::read_to_string(&path).unwrap();
    let (header, body) = text.split_once('\n').unwrap();
    let (magic, _) = header.split_once(' ').unwrap();
    std::fs::write(&path, format!("{magic} 999\n{body}")).unwrap();
    match TrainedModel::load(&path) {
        Err(TrainError::Checkpoint(msg)) => assert!(msg.contains("999"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(tftm(&config, &["evaluate"]).is_err());

    // a tampered configuration no longer matches its fingerprint
    let tampered = body.replacen("\"hidden_size\":8", "\"hidden_size\":16", 1);
    assert_ne!(tampered, body);
    std::fs::write(&path, format!("{header}\n{tampered}")).unwrap();
    assert!(matches!(TrainedModel::load(&path), Err(TrainError::Checkpoint(_))));
}

#[test]
fn help_and_version_are_not_failures() {
    for flag in ["--help", "--version"] {
        match run(["tftm", flag]) {
            Err(CliError::Args(e)) => assert_eq!(e.exit_code(), 0),
            other => panic!("{other:?}"),
        }
    }
}
