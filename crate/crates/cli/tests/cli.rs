//! End-to-end tests of the `aedm` binary: exit codes, JSON output,
//! run manifests, and a miniature synth → chips → train → infer → eval
//! pipeline run entirely through the CLI.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::tempdir;

fn aedm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aedm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().unwrap_or_else(|| {
        panic!("no stdout; stderr: {}", String::from_utf8_lossy(&out.stderr))
    });
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stdout not JSON ({e}): {line}"))
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_manifest(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("run_manifest.json")).expect("manifest exists");
    serde_json::from_str(&text).expect("manifest is JSON")
}

fn sha256_hex(path: &Path) -> String {
    let bytes = std::fs::read(path).expect("output file readable");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Tiny but complete scene: enough buildings for chips to survive the
/// foreground filter, small enough to train in seconds.
fn synth_tiny(dir: &Path, out: &str, seed: u64) -> PathBuf {
    let out_dir = dir.join(out);
    let result = aedm(
        &[
            "synth",
            "--preset",
            "ventura_like",
            "--width",
            "128",
            "--height",
            "128",
            "--n-intact",
            "8",
            "--n-damaged",
            "5",
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            &seed.to_string(),
        ],
        dir,
    );
    assert_exit(&result, 0);
    out_dir
}

#[test]
fn help_exits_zero() {
    let dir = tempdir().unwrap();
    let out = aedm(&["--help"], dir.path());
    assert_exit(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "rasterize", "chips", "train", "finetune", "infer", "eval", "report"] {
        assert!(text.contains(sub), "help should list {sub}");
    }
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempdir().unwrap();
    let out = aedm(&["synth", "--no-such-flag", "--out", "x"], dir.path());
    assert_exit(&out, 1);
}

#[test]
fn missing_subcommand_is_usage_error() {
    let dir = tempdir().unwrap();
    let out = aedm(&[], dir.path());
    assert_exit(&out, 1);
}

#[test]
fn missing_input_is_data_error_naming_the_path() {
    let dir = tempdir().unwrap();
    let out = aedm(
        &["eval", "--pred", "no_such_mask.png", "--truth", "also_missing.png", "--out", "."],
        dir.path(),
    );
    assert_exit(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no_such_mask.png"), "stderr: {stderr}");
}

#[test]
fn unknown_preset_is_data_error_listing_presets() {
    let dir = tempdir().unwrap();
    let out = aedm(&["synth", "--preset", "atlantis", "--out", "s"], dir.path());
    assert_exit(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("ventura_like") && stderr.contains("santa_rosa_like"));
}

#[test]
fn report_matches_hand_arithmetic() {
    let dir = tempdir().unwrap();
    let out = aedm(
        &[
            "report",
            "--features",
            "1080",
            "--rate",
            "30",
            "--pipeline-seconds",
            "10800",
            "--out",
            ".",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    let v = stdout_json(&out);
    assert_eq!(v["features"], 1080);
    assert_eq!(v["manual_s"], 32400.0);
    assert_eq!(v["pipeline_s"], 10800.0);
    assert_eq!(v["speedup"], 3.0);

    let on_disk: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("effort_report.json")).unwrap())
            .unwrap();
    assert_eq!(on_disk["manual_s"], 32400.0);
    let manifest = read_manifest(dir.path());
    assert_eq!(manifest["subcommand"], "report");
}

#[test]
fn synth_writes_artifacts_and_checksummed_manifest() {
    let dir = tempdir().unwrap();
    let scene = synth_tiny(dir.path(), "scene", 7);
    for name in ["pre.png", "post.png", "mask.png", "labels.geojson", "run_manifest.json"] {
        assert!(scene.join(name).is_file(), "{name} should exist");
    }
    for name in ["pre.pgw", "post.pgw", "mask.pgw"] {
        assert!(scene.join(name).is_file(), "{name} world file should exist");
    }

    let manifest = read_manifest(&scene);
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["width"], 128);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 7);
    for entry in outputs {
        let path = PathBuf::from(entry["path"].as_str().unwrap());
        assert_eq!(
            entry["sha256"].as_str().unwrap(),
            sha256_hex(&path),
            "checksum mismatch for {}",
            path.display()
        );
    }
}

#[test]
fn synth_same_seed_is_reproducible_across_runs() {
    let dir = tempdir().unwrap();
    let a = synth_tiny(dir.path(), "a", 11);
    let b = synth_tiny(dir.path(), "b", 11);
    for name in ["pre.png", "post.png", "mask.png", "labels.geojson"] {
        assert_eq!(
            sha256_hex(&a.join(name)),
            sha256_hex(&b.join(name)),
            "{name} should be bit-identical for the same seed"
        );
    }
    let c = synth_tiny(dir.path(), "c", 12);
    assert_ne!(sha256_hex(&a.join("pre.png")), sha256_hex(&c.join("pre.png")));
}

#[test]
fn config_file_overrides_defaults_and_flags_override_config() {
    let dir = tempdir().unwrap();
    let config_path = dir.path().join("cfg.json");
    std::fs::write(
        &config_path,
        serde_json::json!({
            "seed": 3,
            "synth": {
                "width": 96,
                "height": 96,
                "n_intact": 6,
                "n_damaged": 3,
                "illumination": { "brightness": 0.9 }
            }
        })
        .to_string(),
    )
    .unwrap();

    // Flag beats config for height; config beats preset default elsewhere.
    let out_dir = dir.path().join("scene");
    let out = aedm(
        &[
            "synth",
            "--config",
            config_path.to_str().unwrap(),
            "--height",
            "112",
            "--out",
            out_dir.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    let manifest = read_manifest(&out_dir);
    assert_eq!(manifest["config"]["width"], 96, "config section applies");
    assert_eq!(manifest["config"]["height"], 112, "flag wins over config");
    let brightness = manifest["config"]["illumination"]["brightness"].as_f64().unwrap();
    assert!((brightness - 0.9).abs() < 1e-6, "nested keys merge, got {brightness}");
    assert_eq!(
        manifest["config"]["illumination"]["sun_azimuth_deg"], 135.0,
        "unmentioned nested keys keep their defaults"
    );
    assert_eq!(manifest["seed"], 3, "seed comes from the config file");
}

#[test]
fn bad_config_section_is_data_error() {
    let dir = tempdir().unwrap();
    let config_path = dir.path().join("cfg.json");
    std::fs::write(&config_path, r#"{"no_such_section": {}}"#).unwrap();
    let out = aedm(
        &["synth", "--config", config_path.to_str().unwrap(), "--out", "s"],
        dir.path(),
    );
    assert_exit(&out, 2);
}

#[test]
fn eval_of_identical_masks_is_perfect() {
    let dir = tempdir().unwrap();
    let scene = synth_tiny(dir.path(), "scene", 5);
    let mask = scene.join("mask.png");
    let out = aedm(
        &[
            "eval",
            "--pred",
            mask.to_str().unwrap(),
            "--truth",
            mask.to_str().unwrap(),
            "--out",
            "evalout",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    let v = stdout_json(&out);
    assert_eq!(v["accuracy"], 1.0);
    for class in ["background", "intact", "damaged"] {
        assert_eq!(v["classes"][class]["f1"], 1.0, "{class} f1");
        assert_eq!(v["classes"][class]["iou"], 1.0, "{class} iou");
    }
    assert!(dir.path().join("evalout/metrics.json").is_file());
}

#[test]
fn rasterize_reproduces_the_synth_mask() {
    let dir = tempdir().unwrap();
    let scene = synth_tiny(dir.path(), "scene", 9);
    let out = aedm(
        &[
            "rasterize",
            "--labels",
            scene.join("labels.geojson").to_str().unwrap(),
            "--like",
            scene.join("pre.png").to_str().unwrap(),
            "--out",
            "burned",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    let burned = dir.path().join("burned/mask.png");
    assert_eq!(
        sha256_hex(&burned),
        sha256_hex(&scene.join("mask.png")),
        "re-rasterized labels should reproduce the scene mask exactly"
    );
}

#[test]
fn divergent_training_exits_three() {
    let dir = tempdir().unwrap();
    let scene = synth_tiny(dir.path(), "scene", 21);
    let chips = aedm(
        &[
            "chips",
            "--scene",
            scene.to_str().unwrap(),
            "--out",
            "chipdir",
            "--chip-size",
            "32",
            "--val-fraction",
            "0.3",
        ],
        dir.path(),
    );
    assert_exit(&chips, 0);

    let config_path = dir.path().join("diverge.json");
    std::fs::write(
        &config_path,
        serde_json::json!({
            "train": {
                "learning_rate": 1e12,
                "optimizer": { "kind": "sgd_momentum", "momentum": 0.9 }
            }
        })
        .to_string(),
    )
    .unwrap();
    let out = aedm(
        &[
            "train",
            "--chips",
            "chipdir/chips.jsonl",
            "--scene",
            scene.to_str().unwrap(),
            "--out",
            "run",
            "--epochs",
            "3",
            "--depth",
            "1",
            "--base-channels",
            "2",
            "--config",
            config_path.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_exit(&out, 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("diverged"), "stderr: {stderr}");
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempdir().unwrap();
    let scene_a = synth_tiny(dir.path(), "scene_a", 31);
    let scene_b = synth_tiny(dir.path(), "scene_b", 32);

    let chips = aedm(
        &[
            "chips",
            "--scene",
            scene_a.to_str().unwrap(),
            "--scene",
            scene_b.to_str().unwrap(),
            "--out",
            "chipdir",
            "--chip-size",
            "32",
            "--stride",
            "32",
            "--val-fraction",
            "0.3",
        ],
        dir.path(),
    );
    assert_exit(&chips, 0);
    let counts = stdout_json(&chips);
    assert!(counts["train"].as_u64().unwrap() > 0);
    assert!(counts["val"].as_u64().unwrap() > 0);

    let train = aedm(
        &[
            "train",
            "--chips",
            "chipdir/chips.jsonl",
            "--scene",
            scene_a.to_str().unwrap(),
            "--scene",
            scene_b.to_str().unwrap(),
            "--out",
            "run",
            "--epochs",
            "2",
            "--batch-size",
            "4",
            "--depth",
            "1",
            "--base-channels",
            "2",
        ],
        dir.path(),
    );
    assert_exit(&train, 0);
    let summary = stdout_json(&train);
    assert!(summary["val_f1_damaged"].is_number());
    assert!(dir.path().join("run/weights.aedm").is_file());
    let history = std::fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_f1_damaged,val_f1_intact,seconds"));
    assert_eq!(history.lines().count(), 3, "header plus one line per epoch");

    // Fresh markup for the finetune step: everything stays in one role.
    let markup = aedm(
        &[
            "chips",
            "--scene",
            scene_b.to_str().unwrap(),
            "--out",
            "markup",
            "--chip-size",
            "32",
            "--val-fraction",
            "0",
        ],
        dir.path(),
    );
    assert_exit(&markup, 0);
    let finetune = aedm(
        &[
            "finetune",
            "--weights",
            "run/weights.aedm",
            "--chips",
            "markup/chips.jsonl",
            "--scene",
            scene_b.to_str().unwrap(),
            "--out",
            "adapted",
            "--epochs",
            "1",
            "--batch-size",
            "4",
            "--freeze-encoders",
        ],
        dir.path(),
    );
    assert_exit(&finetune, 0);
    assert!(dir.path().join("adapted/weights.aedm").is_file());

    let infer = aedm(
        &[
            "infer",
            "--weights",
            "adapted/weights.aedm",
            "--scene",
            scene_a.to_str().unwrap(),
            "--out",
            "pred",
            "--chip-size",
            "32",
            "--stride",
            "16",
        ],
        dir.path(),
    );
    assert_exit(&infer, 0);
    let counts = stdout_json(&infer);
    assert!(counts["damaged_count"].is_u64());
    assert!(dir.path().join("pred/mask.png").is_file());
    let instances =
        std::fs::read_to_string(dir.path().join("pred/instances.geojson")).unwrap();
    assert!(instances.contains("\"FeatureCollection\""));

    let eval = aedm(
        &[
            "eval",
            "--pred",
            "pred/mask.png",
            "--truth",
            scene_a.join("mask.png").to_str().unwrap(),
            "--out",
            "metrics",
        ],
        dir.path(),
    );
    assert_exit(&eval, 0);
    let v = stdout_json(&eval);
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}
