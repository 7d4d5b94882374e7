mod common;

use std::process::Command;

use langadapt::pipeline::{run_pipeline, run_stages, stages_through, RunLayout, RunLock, Stage};
use langadapt_core::optim::OptimizerKind;
use langadapt_core::Error;
use serde_json::Value;

use common::{quick, synthetic, tree_hashes};

fn read_json(path: &std::path::Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn rerun_skips_every_stage_and_keeps_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = synthetic(dir.path(), 20);
    let cfg = quick(cfg);
    let first = run_pipeline(&cfg).unwrap();
    assert!(first.stages.iter().all(|s| !s.skipped));
    let before = tree_hashes(&cfg.output_dir);
    let second = run_pipeline(&cfg).unwrap();
    assert_eq!(second.stages.len(), 4);
    assert!(second.stages.iter().all(|s| s.skipped));
    assert_eq!(before, tree_hashes(&cfg.output_dir));
    assert!(!cfg.output_dir.join("run.lock").exists());
}

#[test]
fn every_report_carries_the_config_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = synthetic(dir.path(), 20);
    let cfg = quick(cfg);
    let summary = run_pipeline(&cfg).unwrap();
    let layout = RunLayout::single(&cfg.output_dir);
    for path in [
        layout.corpus_summary(),
        layout.stage1_report(),
        layout.stage2_log(),
        layout.eval_report(),
        cfg.output_dir.join("config.json"),
    ] {
        let v = read_json(&path);
        assert_eq!(
            v["config_hash"],
            summary.config_hash.as_str(),
            "{}",
            path.display()
        );
        assert_eq!(v["seed"], cfg.seed, "{}", path.display());
    }
    let (_, stamp) = langadapt_core::AdapterF32::load(&layout.stage2_adapter()).unwrap();
    assert_eq!(
        stamp,
        format!("config={};seed={}", summary.config_hash, cfg.seed)
    );
}

#[test]
fn changed_stage2_settings_rerun_only_later_stages() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = synthetic(dir.path(), 20);
    let mut cfg = quick(cfg);
    run_pipeline(&cfg).unwrap();
    cfg.stage2.loss.entropy_enabled = false;
    let s = run_pipeline(&cfg).unwrap();
    let skipped: Vec<bool> = s.stages.iter().map(|s| s.skipped).collect();
    assert_eq!(skipped, [true, true, false, false]);
}

#[test]
fn tampered_output_is_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = synthetic(dir.path(), 20);
    let cfg = quick(cfg);
    run_pipeline(&cfg).unwrap();
    let layout = RunLayout::single(&cfg.output_dir);
    let good = std::fs::read(layout.eval_report()).unwrap();
    std::fs::write(layout.eval_report(), b"{}").unwrap();
    let s = run_pipeline(&cfg).unwrap();
    assert!(!s.stages[3].skipped);
    assert!(s.stages[..3].iter().all(|s| s.skipped));
    assert_eq!(std::fs::read(layout.eval_report()).unwrap(), good);
}

#[test]
fn missing_corpus_fails_validation_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let (_, mut cfg) = synthetic(dir.path(), 5);
    cfg.corpus = dir.path().join("absent.json");
    assert!(matches!(run_pipeline(&cfg), Err(Error::Validation(_))));
    assert!(!cfg.output_dir.exists());
}

#[test]
fn failed_stage_leaves_a_marker_and_the_rerun_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = synthetic(dir.path(), 20);
    let good = quick(cfg);
    let mut bad = good.clone();
    bad.stage2.optimizer = OptimizerKind::Adam;
    bad.stage2.learning_rate = 1e308;
    bad.stage2.prompt_learning_rate = Some(1e308);
    let err = run_pipeline(&bad).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    let layout = RunLayout::single(&good.output_dir);
    let marker = read_json(&layout.failed_marker());
    assert_eq!(marker["stage"], "stage2");
    assert!(layout.stage1_adapter().exists());

    let s = run_pipeline(&good).unwrap();
    let skipped: Vec<bool> = s.stages.iter().map(|s| s.skipped).collect();
    assert_eq!(skipped, [true, true, false, false]);
    assert!(!layout.failed_marker().exists());
}

#[test]
fn a_locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = synthetic(dir.path(), 5);
    let held = RunLock::acquire(&cfg.output_dir).unwrap();
    let err = run_stages(
        &cfg,
        &RunLayout::single(&cfg.output_dir),
        &stages_through(Stage::Corpus),
    )
    .unwrap_err();
    assert!(err.to_string().contains("locked"), "{err}");
    drop(held);
    run_stages(
        &cfg,
        &RunLayout::single(&cfg.output_dir),
        &stages_through(Stage::Corpus),
    )
    .unwrap();
}

#[test]
fn stale_lock_from_a_dead_process_is_replaced() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.lock"), "4294967\n").unwrap();
    let lock = RunLock::acquire(dir.path()).unwrap();
    let owner = std::fs::read_to_string(dir.path().join("run.lock")).unwrap();
    assert_eq!(owner.trim(), std::process::id().to_string());
    drop(lock);
}

#[test]
fn manifest_label_outside_the_catalog_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, cfg) = synthetic(dir.path(), 5);
    let text = std::fs::read_to_string(&paths.manifest).unwrap();
    std::fs::write(&paths.manifest, text.replacen(",normal", ",pneumonia", 1)).unwrap();
    assert!(matches!(run_pipeline(&cfg), Err(Error::Data(_))));
}

fn cli(args: &[&str], cwd: &std::path::Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_langadapt"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr),
    )
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, out) = cli(&["synth", "--out", "data", "--images-per-class", "10"], d);
    assert_eq!(code, 0, "{out}");
    let toml_path = d.join("data/run.toml");
    let toml = std::fs::read_to_string(&toml_path).unwrap();
    let quick = toml.replace("epochs = 50", "epochs = 2");
    std::fs::write(&toml_path, &quick).unwrap();

    let (code, out) = cli(&["eval", "--config", "data/run.toml"], d);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("stage-2 test accuracy"), "{out}");
    // Same run from another working directory: same hash, nothing recomputed.
    let (code, again) = cli(&["eval", "--config", "run.toml"], &d.join("data"));
    assert_eq!(code, 0, "{again}");
    assert_eq!(out.lines().next(), again.lines().next());
    assert_eq!(again.matches("skipped").count(), 4, "{again}");

    std::fs::write(&toml_path, quick.replace("corpus.json", "missing.json")).unwrap();
    assert_eq!(cli(&["eval", "--config", "data/run.toml"], d).0, 1);
    assert_eq!(cli(&["eval", "--config", "data/nope.toml"], d).0, 1);
    assert_eq!(cli(&["no-such-command"], d).0, 1);

    std::fs::write(
        d.join("bad.csv"),
        "item_id,path,label\na,missing.png,normal\n",
    )
    .unwrap();
    assert_eq!(
        cli(&["split", "--manifest", "bad.csv", "--out", "s.csv"], d).0,
        2
    );

    let (code, out) = cli(
        &[
            "corpus",
            "validate",
            "data/corpus.json",
            "--catalog",
            "data/catalog.json",
        ],
        d,
    );
    assert_eq!(code, 0, "{out}");
    let (code, out) = cli(
        &[
            "corpus",
            "generate",
            "--catalog",
            "data/catalog.json",
            "--templates",
            "data/templates.json",
            "--llm",
            "fixture:data/llm_fixture.json",
            "--samples",
            "8",
            "--out",
            "replayed.json",
        ],
        d,
    );
    assert_eq!(code, 0, "{out}");
    let a: Value =
        serde_json::from_slice(&std::fs::read(d.join("data/corpus.json")).unwrap()).unwrap();
    let b: Value =
        serde_json::from_slice(&std::fs::read(d.join("replayed.json")).unwrap()).unwrap();
    assert_eq!(a["entries"], b["entries"]);
}
