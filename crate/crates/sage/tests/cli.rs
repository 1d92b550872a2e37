mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sage::imageio;
use sage::manifest::RunManifest;

fn sage() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sage"));
    c.env_remove("SAGE_DEVICE").env_remove("SAGE_DETERMINISTIC");
    c
}

fn run(args: &[&str]) -> Output {
    sage().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    sage::dataset::png_files(dir).unwrap()
}

fn tiny_ckpt(root: &Path) -> PathBuf {
    common::save_under(root, "ink", &common::tiny_stage2(11), Some("ink"))
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let o = run(&["train", "--config", "/no/such/run.toml", "--stage", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/run.toml"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(run(&["generate", "--seed", "1"]).status.code(), Some(2));
    assert_eq!(run(&["nonsense"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn stage2_without_resume_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, common::tiny_toml(&tmp.path().join("out"), 1)).unwrap();
    let o = run(&["train", "--config", s(&cfg), "--stage", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--resume"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[model.projector]\nd_zz = 3\n").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--stage", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.projector.d_zz"), "{}", stderr(&o));
}

#[test]
fn gpu_device_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tiny_ckpt(tmp.path());
    let out = tmp.path().join("gen");
    let o = sage()
        .env("SAGE_DEVICE", "gpu")
        .args(["generate", "--ckpt", s(&ck), "--seed", "1", "--out", s(&out)])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gpu"));
    assert!(!out.exists());
}

#[test]
fn seven_views_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tiny_ckpt(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = run(&["generate", "--ckpt", s(&ck), "--seed", "42", "--count", "7", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let files = pngs(&a);
    let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, (0..7).map(|v| format!("42_{v}.png")).collect::<Vec<_>>());
    for f in &files {
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(f).unwrap(), fs::read(b.join(name)).unwrap(), "{name:?}");
    }
    // views differ from each other
    assert_ne!(fs::read(&files[0]).unwrap(), fs::read(&files[6]).unwrap());
    let m = RunManifest::read(&a).unwrap();
    assert_eq!(m.command, "generate");
    assert_eq!(m.seed, 42);
}

#[test]
fn single_view_matches_the_centre_of_the_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tiny_ckpt(tmp.path());
    let sweep = tmp.path().join("sweep");
    let one = tmp.path().join("one");
    assert!(run(&["generate", "--ckpt", s(&ck), "--seed", "3", "--count", "7", "--out", s(&sweep)]).status.success());
    assert!(run(&["generate", "--ckpt", s(&ck), "--seed", "3", "--yaw", "0", "--pitch", "0", "--out", s(&one)])
        .status
        .success());
    assert_eq!(fs::read(sweep.join("3_3.png")).unwrap(), fs::read(one.join("3_0.png")).unwrap());
}

#[test]
fn masks_hold_class_indices() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tiny_ckpt(tmp.path());
    let out = tmp.path().join("gen");
    let o = run(&["generate", "--ckpt", s(&ck), "--seed", "5", "--emit-mask", "--emit-photo", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (labels, h, w) = imageio::load_labels(&out.join("5_0_mask.png")).unwrap();
    assert_eq!((h, w), (16, 16));
    assert!(labels.iter().all(|&l| l <= 18));
    let photo = imageio::load_rgb(&out.join("5_0_photo.png")).unwrap();
    assert_eq!(photo.shape(), &[3, 16, 16]);
}

#[test]
fn out_of_bounds_pose_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tiny_ckpt(tmp.path());
    let o = run(&["generate", "--ckpt", s(&ck), "--seed", "1", "--yaw", "-2.0", "--out", s(&tmp.path().join("g"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["generate", "--ckpt", s(&ck), "--seed", "1", "--yaw", "0.1", "--count", "3", "--out", s(&tmp.path().join("g"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn metrics_identities_and_report_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tiny_ckpt(tmp.path());
    let gen = tmp.path().join("gen");
    let real = tmp.path().join("real");
    for out in [&gen, &real] {
        assert!(run(&["generate", "--ckpt", s(&ck), "--seed", "8", "--count", "4", "--out", s(out)]).status.success());
    }
    let schema: serde_json::Value = serde_json::from_str(sage::report::METRIC_REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    for metric in ["swd", "fid", "sifid"] {
        let o = run(&["metrics", "--gen", s(&gen), "--real", s(&real), "--metric", metric, "--seed", "2"]);
        assert!(o.status.success(), "{metric}: {}", stderr(&o));
        let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        let written: serde_json::Value =
            serde_json::from_slice(&fs::read(gen.join(format!("metrics_{metric}.json"))).unwrap()).unwrap();
        assert_eq!(printed, written);
        assert!(validator.is_valid(&written), "{written}");
        assert_eq!(written["metric"], metric);
        assert_eq!(written["n_gen"], 4);
        let v = written["value"].as_f64().unwrap();
        assert!(v < 1e-6, "{metric} of identical sets = {v}");
    }
    let bad = serde_json::json!({"metric": "swd", "value": -1.0, "n_gen": 1, "n_real": 1, "embedder_id": "x", "seed": 0});
    assert!(!validator.is_valid(&bad));
}

#[test]
fn metrics_on_an_empty_directory_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let ck = tiny_ckpt(tmp.path());
    let gen = tmp.path().join("gen");
    assert!(run(&["generate", "--ckpt", s(&ck), "--seed", "1", "--out", s(&gen)]).status.success());
    let o = run(&["metrics", "--gen", s(&gen), "--real", s(&empty), "--metric", "swd"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
}

#[test]
fn curve_has_one_row_per_view() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tiny_ckpt(tmp.path());
    let real = tmp.path().join("real");
    assert!(run(&["generate", "--ckpt", s(&ck), "--seed", "0", "--count", "3", "--out", s(&real)]).status.success());
    let csv = tmp.path().join("curve.csv");
    let o = run(&["curve", "--ckpt", s(&ck), "--real", s(&real), "--samples", "2", "--out", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 8, "{text}");
    assert!(lines[0].starts_with("pose_index"));
}

#[test]
fn edit_transfer_and_interpolate_write_their_files() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tiny_ckpt(tmp.path());
    let other = common::save_under(tmp.path(), "other", &common::tiny_stage2(12), None);
    let edits = tmp.path().join("edits.json");
    fs::write(&edits, r#"[{"polygon": [[0, 0], [8, 0], [8, 8], [0, 8]], "class": 4}]"#).unwrap();
    let out = tmp.path().join("edit");
    let o = run(&["edit", "--ckpt", s(&ck), "--seed", "2", "--edits", s(&edits), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (labels, _, w) = imageio::load_labels(&out.join("mask_edited.png")).unwrap();
    assert!((0..8).all(|i| (0..8).all(|j| labels[i * w + j] == 4)));

    let out = tmp.path().join("transfer");
    let o = run(&[
        "transfer", "--content", s(&ck), "--style", s(&other), "--content-seed", "1", "--style-seed", "2", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("transfer.png").is_file());

    let out = tmp.path().join("interp");
    let o = run(&[
        "interpolate", "--ckpt", s(&ck), "--seeds", "1", "2", "--from", "-0.3", "0", "--to", "0.3", "0.1", "--steps", "5",
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(pngs(&out).len(), 5);
    // the first frame is the direct generation at the start pose
    let direct = tmp.path().join("direct");
    assert!(run(&["generate", "--ckpt", s(&ck), "--seed", "1", "--yaw", "-0.3", "--pitch", "0", "--out", s(&direct)])
        .status
        .success());
    assert_eq!(fs::read(out.join("frame_000.png")).unwrap(), fs::read(direct.join("1_0.png")).unwrap());
}

#[test]
fn augment_writes_drawings_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("aug");
    let o = run(&["augment", "--synthetic", "3", "--resolution", "32", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let data = sage::dataset::load(&out).unwrap();
    assert_eq!(data.len(), 3);
    assert!(out.join("augment_manifest.json").is_file());
    assert_eq!(run(&["augment", "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn training_smoke_run_writes_checkpoints_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let cfg = tmp.path().join("run.toml");
    let text = common::tiny_toml(&run_dir, 2);
    fs::write(&cfg, &text).unwrap();
    let o = sage()
        .env("SAGE_DETERMINISTIC", "1")
        .args(["train", "--config", s(&cfg), "--stage", "1"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let s1 = run_dir.join("stage1/step2");
    for f in ["params.bin", "optim.bin", "meta.json"] {
        assert!(s1.join(f).is_file(), "{f}");
    }
    let m = RunManifest::read(&run_dir.join("stage1")).unwrap();
    assert!(m.deterministic);
    assert_eq!(m.config_hash.as_deref(), Some(sage::config::content_hash(text.as_bytes()).as_str()));
    let log = fs::read_to_string(run_dir.join("stage1/losses.csv")).unwrap();
    assert!(log.lines().count() > 2);

    let o = run(&["train", "--config", s(&cfg), "--stage", "2", "--resume", s(&run_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s2 = sage::checkpoint::load(&run_dir.join("stage2/step2")).unwrap();
    let p1 = sage::checkpoint::load(&s1).unwrap().params;
    for (n, t) in p1.with_prefix("projector.") {
        assert_eq!(t.bits(), s2.params.get(n).unwrap().bits(), "{n}");
    }
    assert!(run_dir.join("augmented/augment_manifest.json").is_file());
    let gen = tmp.path().join("gen");
    assert!(run(&["generate", "--ckpt", s(&run_dir), "--seed", "1", "--out", s(&gen)]).status.success());
}
