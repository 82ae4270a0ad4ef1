use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dga::cli::{parse_config, RunConfig};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn dga(run_dir: &Path, args: &[&str]) -> Output {
    let tiny = configs().join("tiny.toml");
    Command::new(env!("CARGO_BIN_EXE_dga"))
        .arg("--config")
        .arg(&tiny)
        .arg("--set")
        .arg(format!("paths.run_dir={}", run_dir.display()))
        .args(args)
        .env_remove("DGA_THREADS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn shipped_configs_parse() {
    let default = parse_config(Some(&configs().join("default.toml")), &[]).unwrap();
    assert_eq!(default, RunConfig::default());
    let tiny = parse_config(Some(&configs().join("tiny.toml")), &[]).unwrap();
    assert_eq!(tiny.seeds, vec![1, 2]);
    assert_eq!(tiny.model.d_model, 16);
    assert_eq!(tiny.datrain.tau, RunConfig::default().datrain.tau);
}

#[test]
fn overrides_beat_file_values() {
    let cfg = parse_config(
        Some(&configs().join("tiny.toml")),
        &["datrain.steps=3".into(), "seeds=[7]".into(), "paths.run_dir=/tmp/x".into()],
    )
    .unwrap();
    assert_eq!(cfg.datrain.steps, 3);
    assert_eq!(cfg.seeds, vec![7]);
    assert_eq!(cfg.paths.run_dir, PathBuf::from("/tmp/x"));
    let err = parse_config(None, &["datrain.bogus=1".into()]).unwrap_err().to_string();
    assert!(err.contains("datrain.bogus"), "{err}");
    let err = parse_config(None, &["datrain.tau=0".into()]).unwrap_err().to_string();
    assert!(err.contains("datrain: tau > 0"), "{err}");
}

#[test]
fn pipeline_runs_stage_by_stage() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();

    let o = dga(run, &["da-train"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: missing dependency:"), "{err}");

    for stage in ["gen-corpus", "pretrain", "importance", "da-train", "finetune", "eval"] {
        let o = dga(run, &[stage]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    for f in [
        "config.toml",
        "corpus/general.txt",
        "corpus/vocab.json",
        "general.ckpt",
        "pretrain_metrics.csv",
        "importance.json",
        "importance_general.json",
        "importance_diagnostics.json",
        "importance_buckets.csv",
        "importance_cosine.csv",
        "da/model.ckpt",
        "da/metrics.csv",
        "finetune.json",
        "eval.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let echoed = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("d_model = 16"));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["checkpoint"].as_str().unwrap(), run.join("da/model.ckpt").to_str().unwrap());
    assert!(eval["general_ppl"].as_f64().unwrap() > 1.0);
}

#[test]
fn dga_training_requires_importance() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    for stage in ["gen-corpus", "pretrain"] {
        assert!(dga(run, &[stage]).status.success());
    }
    let o = dga(run, &["da-train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("importance"), "{}", stderr(&o));
    let o = dga(run, &["--set", "datrain.mask_variant=none", "da-train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dga(run, &["da-train", "--set", "datrain.mask_variant=none"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_layout_and_report_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    let o = dga(run, &["ablate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ablate = run.join("ablate");
    let mut folders: Vec<String> = fs::read_dir(ablate.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    folders.sort();
    assert_eq!(folders.len(), 12);
    for v in ["base", "mlm", "dga", "dga-no-contrast", "dga-random-mask", "dga-domain-specific"] {
        for s in [1, 2] {
            let f = ablate.join("runs").join(format!("{v}-seed{s}"));
            for name in ["report.json", "metrics.csv", "config.toml"] {
                assert!(f.join(name).is_file(), "{}", f.join(name).display());
            }
        }
    }
    let outputs = [
        "results.csv",
        "results.json",
        "loss_curves.csv",
        "loss_curves.svg",
        "importance_buckets.csv",
        "importance_cosine.csv",
        "importance_diagnostics.json",
    ];
    let before: Vec<Vec<u8>> = outputs.iter().map(|f| fs::read(ablate.join(f)).unwrap()).collect();
    let o = dga(run, &["report"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let after: Vec<Vec<u8>> = outputs.iter().map(|f| fs::read(ablate.join(f)).unwrap()).collect();
    assert_eq!(before, after);

    let csv = String::from_utf8(before[0].clone()).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    let mut variants: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    variants.dedup();
    assert_eq!(
        variants,
        ["Base", "MLM", "DGA", "DGA w/o contrast", "DGA random mask", "DGA domain-specific"]
    );
    assert!(rows.iter().all(|r| r.ends_with(",2")));
}

#[test]
fn report_on_missing_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = dga(dir.path(), &["report", "--dir", dir.path().join("nope").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: aggregation error:"), "{}", stderr(&o));
}

#[test]
fn bad_invocations_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    let o = dga(run, &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dga(run, &["--set", "datrain.tau=0", "gen-corpus"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).trim(), "error: config error: datrain: tau > 0");
    let o = dga(run, &["--set", "model.d_model=\"wide\"", "gen-corpus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.d_model"), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_dga"))
        .args(["--set", &format!("paths.run_dir={}", run.display()), "gen-corpus"])
        .env("DGA_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("DGA_THREADS"));
}
