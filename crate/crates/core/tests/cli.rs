//! End-to-end tests of the radcam binary: exit codes, determinism, and the
//! printed summaries.

use std::path::Path;
use std::process::{Command, Output};

fn radcam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radcam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

#[test]
fn gen_data_zero_samples_is_a_valid_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let result = radcam(&[
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--samples",
        "0",
        "--seed",
        "1",
    ]);
    assert!(result.status.success());
    let (manifest, samples) = radcam::synthdata::read_dataset(&out).unwrap();
    assert_eq!(manifest.samples.len(), 0);
    assert_eq!(samples.len(), 0);
}

#[test]
fn gen_data_same_flags_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let result = radcam(&[
            "gen-data",
            "--out",
            out.to_str().unwrap(),
            "--samples",
            "3",
            "--seed",
            "9",
            "--lidar-points",
            "200",
        ]);
        assert!(result.status.success());
    }
    let bytes = |dir: &Path, rel: &str| std::fs::read(dir.join(rel)).unwrap();
    assert_eq!(bytes(&a, "manifest.json"), bytes(&b, "manifest.json"));
    assert_eq!(
        bytes(&a, "blobs/sample_00002_radar.bin"),
        bytes(&b, "blobs/sample_00002_radar.bin")
    );
}

#[test]
fn gen_data_summary_counts_match_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let result = radcam(&[
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--samples",
        "4",
        "--seed",
        "5",
        "--lidar-points",
        "150",
    ]);
    assert!(result.status.success());
    let text = stdout(&result);
    let manifest = radcam::synthdata::read_manifest(&out).unwrap();
    let radar_total: usize = manifest.samples.iter().map(|s| s.radar_points).sum();
    let lidar_total: usize = manifest.samples.iter().map(|s| s.lidar_points).sum();
    assert!(text.contains(&format!("radar points {radar_total}")), "{text}");
    assert!(text.contains(&format!("lidar points {lidar_total}")), "{text}");
}

#[test]
fn bad_noise_profile_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let result = radcam(&[
        "gen-data",
        "--out",
        dir.path().join("x").to_str().unwrap(),
        "--samples",
        "1",
        "--noise-profile",
        "imaginary",
    ]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    std::fs::write(&config, "learning_rte = 0.1\n").unwrap();
    let result = radcam(&[
        "train",
        "--data",
        dir.path().join("nope").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("m.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let result = radcam(&[
        "eval",
        "--ckpt",
        dir.path().join("no.ckpt").to_str().unwrap(),
        "--data",
        dir.path().join("nodata").to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(3));
}

#[test]
fn bad_range_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let result = radcam(&[
        "eval",
        "--ckpt",
        dir.path().join("no.ckpt").to_str().unwrap(),
        "--data",
        dir.path().join("nodata").to_str().unwrap(),
        "--range",
        "r9",
    ]);
    assert_eq!(result.status.code(), Some(2));
}

fn tiny_checkpoint(path: &Path) {
    let model = radcam::model::CalibNet::new(radcam::model::ModelConfig {
        channels: 8,
        ffn_hidden: 16,
        d_f: 32,
        d_z: 16,
        lstm_hidden: 16,
        seed: 2,
        ..radcam::model::ModelConfig::default()
    });
    model.to_checkpoint().save(path).unwrap();
}

#[test]
fn calibrate_untrained_model_reports_unchanged_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.ckpt");
    assert!(radcam(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--samples",
        "1",
        "--seed",
        "3",
        "--lidar-points",
        "100",
    ])
    .status
    .success());
    tiny_checkpoint(&ckpt);
    let result = radcam(&[
        "calibrate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--sample",
        data.to_str().unwrap(),
        "--init-rot",
        "10",
        "--init-trans",
        "0.25",
        "--seed",
        "4",
    ]);
    assert!(result.status.success(), "{result:?}");
    let text = stdout(&result);
    // Zero-initialized heads: the final error equals the initial error.
    let grab = |needle: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(needle)).unwrap();
        let rot = line.split("rot ").nth(1).unwrap();
        rot.split_whitespace().next().unwrap().parse().unwrap()
    };
    let initial = grab("sample 0  initial error:");
    let fin = grab("final error:");
    assert!((initial - fin).abs() < 1e-6, "{text}");
    assert!(text.contains("iter 1:") && text.contains("iter 3:"));
}

#[test]
fn eval_report_has_table_columns() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.ckpt");
    assert!(radcam(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--samples",
        "3",
        "--seed",
        "6",
        "--lidar-points",
        "100",
    ])
    .status
    .success());
    tiny_checkpoint(&ckpt);
    let report = dir.path().join("report.json");
    let result = radcam(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--range",
        "r2",
        "--seed",
        "11",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(result.status.success(), "{result:?}");
    let text = stdout(&result);
    for col in ["Mean", "Roll", "Pitch", "Yaw", "X", "Y", "Z"] {
        assert!(text.contains(col), "missing {col} in:\n{text}");
    }
    let parsed: radcam::eval::EvalReport =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.samples.len(), 3);
    assert_eq!(parsed.range_rot_deg, 20.0);
}

#[test]
fn gradcheck_single_module_passes() {
    let result = radcam(&["gradcheck", "--module", "linear"]);
    assert!(result.status.success(), "{result:?}");
    let text = stdout(&result);
    assert!(text.contains("linear"));
    assert!(text.contains("negative control"));
}

#[test]
fn gradcheck_unknown_module_exits_4() {
    let result = radcam(&["gradcheck", "--module", "imaginary"]);
    assert_eq!(result.status.code(), Some(4));
}
