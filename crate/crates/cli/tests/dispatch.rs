use std::path::Path;
use std::process::Command;

use lipsync_cli::config::RunConfig;
use lipsync_cli::{dispatch, rerun, Command as Sub, RunManifest};

fn lipsync(args: &[&str], root: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lipsync"))
        .args(args)
        .env("LIPSYNC_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn evaluate_on_identical_directories_reports_zero_fid() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut config = RunConfig { output_root: root.join("data"), ..RunConfig::default() };
    config.synth.count = 2;
    config.synth.clip.frames = 6;
    config.synth.clip.width = 24;
    config.synth.clip.height = 24;
    config.synth.clip.face_size = 16.0;
    let synth = dispatch(Sub::Synth, &config).unwrap();
    let data = synth.manifest.config.synth.output.clone().unwrap();

    let out = lipsync(
        &["evaluate", "--gen", data.to_str().unwrap(), "--ref", data.to_str().unwrap()],
        &root.join("eval"),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["fid"], 0.0);
    assert_eq!(report["psnr"], "inf");
    assert!(root.join("eval/report.csv").is_file());
    let m = RunManifest::load(&root.join("eval/evaluate.manifest.json")).unwrap();
    assert_eq!(m.artifacts.len(), 2);
    assert_eq!(m.config_hash.len(), 64);
}

#[test]
fn infer_without_checkpoint_fails_clearly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.safetensors");
    let out = lipsync(&["infer", "--checkpoint", missing.to_str().unwrap(), "--video", "v"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("checkpoint not found"), "{err}");
}

#[test]
fn schema_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"infer": {"inference": {"overlap": 20}}}"#).unwrap();
    let out = lipsync(&["infer", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("SCHEMA_ERROR"));
}

#[test]
fn synth_twice_gives_identical_artifacts_and_rerun_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig { seed: Some(3), ..RunConfig::default() };
    let mut hashes = Vec::new();
    for name in ["a", "b"] {
        let mut c = base.clone();
        c.output_root = dir.path().join(name);
        c.synth.count = 2;
        c.synth.clip.frames = 4;
        c.synth.output = Some(dir.path().join(name).join("synth"));
        let run = dispatch(Sub::Synth, &c).unwrap();
        assert_eq!(run.manifest.seed, Some(3));
        hashes.push(run.manifest.artifacts[0].sha256.clone());
        let again = rerun(&run.manifest_path).unwrap();
        assert_eq!(again.manifest.artifacts, run.manifest.artifacts);
        assert_eq!(again.manifest.config_hash, run.manifest.config_hash);
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn curate_then_train_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut c = RunConfig { output_root: root.to_path_buf(), ..RunConfig::default() };
    c.synth.count = 2;
    c.synth.clip.frames = 8;
    c.synth.clip.width = 32;
    c.synth.clip.height = 32;
    c.synth.clip.face_size = 24.0;
    dispatch(Sub::Synth, &c).unwrap();

    c.train.dataset = Some(root.join("synth/dataset.jsonl"));
    c.train.model.resolution = 16;
    c.train.model.guider_downsampler = vec![8, 8, 8, 8];
    c.train.model.unet.down_channels = vec![8, 16];
    c.train.model.unet.self_attention = vec![false, false];
    c.train.model.unet.temporal_window = 16;
    c.train.training.frames_per_clip = 4;
    c.train.training.steps = 2;
    let first = dispatch(Sub::Train, &c).unwrap();
    let losses = first.manifest.details["losses"].as_array().unwrap();
    assert_eq!(losses.len(), 2);

    c.train.training.steps = 3;
    c.train.resume = Some(root.join("checkpoint.safetensors"));
    let resumed = dispatch(Sub::Train, &c).unwrap();
    assert_eq!(resumed.manifest.details["first_step"], 2);
    assert_eq!(resumed.manifest.details["steps_done"], 3);

    let cfg = root.join("curate.json");
    std::fs::write(&cfg, "{}").unwrap();
    let out = lipsync(&["curate", "--config", cfg.to_str().unwrap(), "--input", root.join("synth").to_str().unwrap()], &root.join("cur"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = RunManifest::load(&root.join("cur/curate.manifest.json")).unwrap();
    assert_eq!(m.details["records"].as_u64().unwrap() >= 2, true);
}
