//! Black-box tests of the binary: exit codes, artifact outputs, and
//! rerun determinism.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_echotwin"))
}

fn write_tiny_config(path: &Path) {
    std::fs::write(
        path,
        r#"{
  "epochs": 2,
  "batch_size": 2,
  "codebook_size": 16,
  "feature_dim": 16,
  "n_max": 8,
  "bank_size": 6,
  "patch_size": 8,
  "seed": 9,
  "augment": { "n_frames": 8, "train_window": 8, "eval_stride": 1, "resize": null, "crop": null, "flips": true }
}"#,
    )
    .unwrap();
}

fn gen_tiny_data(dir: &Path) {
    let st = bin()
        .args([
            "gen-data",
            "--out",
            dir.to_str().unwrap(),
            "--n-normal",
            "6",
            "--n-abnormal",
            "6",
            "--frames",
            "8",
            "--size",
            "32",
            "--seed",
            "4",
        ])
        .status()
        .unwrap();
    assert!(st.success());
}

#[test]
fn no_arguments_prints_usage_and_exits_one() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("Usage"), "stderr: {text}");
}

#[test]
fn missing_required_flag_names_it() {
    let out = bin().args(["gen-data"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("--out"), "stderr: {text}");
}

#[test]
fn unknown_flag_rejected() {
    let out = bin().args(["gen-data", "--frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny_data(&data);
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "epochs": 1, "no_such_key": 5 }"#).unwrap();
    let out = bin()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            tmp.path().join("run").to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn gen_data_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen_tiny_data(&a);
    gen_tiny_data(&b);
    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap(),
            "{name:?} differs"
        );
    }
}

#[test]
fn full_cli_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny_data(&data);
    let cfg = tmp.path().join("config.json");
    write_tiny_config(&cfg);
    let run = tmp.path().join("run");

    // train prints the resolved config before executing
    let out = bin()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--deterministic",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("resolved-config"));
    assert!(stdout.contains("resolved-seed 9"));
    let ckpt = run.join("checkpoint_final.eckp");
    assert!(ckpt.exists());
    assert!(run.join("losses.csv").exists());

    // inspect prints tensors and never modifies the file
    let before = std::fs::read(&ckpt).unwrap();
    let out = bin()
        .args(["inspect", "--ckpt", ckpt.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("phi_a.encoder.stage0.conv.weight"));
    assert!(text.contains("codebook_a.entries"));
    assert_eq!(std::fs::read(&ckpt).unwrap(), before);

    // eval writes metrics.json, features.csv, embedding2d.csv
    let eval_dir = tmp.path().join("eval");
    let out = bin()
        .args([
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--task",
            "cls",
            "--out",
            eval_dir.to_str().unwrap(),
            "--dump-banks",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert!(metrics.get("acc").is_some());
    assert!(eval_dir.join("features.csv").exists());
    assert!(eval_dir.join("embedding2d.csv").exists());
    assert!(eval_dir.join("bank_a.csv").exists());

    // reconstruct writes PNG frames and the raw clip
    let recon_dir = tmp.path().join("recon");
    let clip = data.join("clip_00000.echoclip");
    let out = bin()
        .args([
            "reconstruct",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--input",
            clip.to_str().unwrap(),
            "--direction",
            "a2b",
            "--out",
            recon_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(recon_dir.join("frame_000.png").exists());
    assert!(recon_dir.join("reconstruction.echoclip").exists());
}

#[test]
fn deterministic_cli_training_reruns_match() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny_data(&data);
    let cfg = tmp.path().join("config.json");
    write_tiny_config(&cfg);
    for run in ["r1", "r2"] {
        let st = bin()
            .args([
                "train",
                "--data",
                data.to_str().unwrap(),
                "--out",
                tmp.path().join(run).to_str().unwrap(),
                "--config",
                cfg.to_str().unwrap(),
                "--deterministic",
            ])
            .status()
            .unwrap();
        assert!(st.success());
    }
    assert_eq!(
        std::fs::read(tmp.path().join("r1/checkpoint_final.eckp")).unwrap(),
        std::fs::read(tmp.path().join("r2/checkpoint_final.eckp")).unwrap()
    );
    assert_eq!(
        std::fs::read(tmp.path().join("r1/losses.csv")).unwrap(),
        std::fs::read(tmp.path().join("r2/losses.csv")).unwrap()
    );
}

#[test]
fn bad_checkpoint_is_a_format_error_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.eckp");
    std::fs::write(&bad, b"garbage").unwrap();
    let out = bin()
        .args(["inspect", "--ckpt", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
