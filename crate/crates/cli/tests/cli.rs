use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn siedob(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siedob"))
        .args(args)
        .env_remove("SIEDOB_CHECKPOINT_DIR")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Toy dataset plus a desk-scale config in `dir`.
fn toy(dir: &Path, count: usize) -> PathBuf {
    let config = dir.join("config.json");
    let out = siedob(&[
        "make-toy-data",
        "--out",
        p(&dir.join("data")),
        "--count",
        &count.to_string(),
        "--config-out",
        p(&config),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    config
}

fn sample_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let samples = dir.join("data/samples");
    let first = std::fs::read_dir(&samples)
        .unwrap()
        .map(|e| e.unwrap().path())
        .min()
        .expect("at least one sample");
    (first.join("image.png"), first.join("seg.png"), first.join("inst.png"))
}

fn write_mask(path: &Path, size: u32, on: impl Fn(u32, u32) -> bool) {
    image::GrayImage::from_fn(size, size, |x, y| image::Luma([if on(x, y) { 255 } else { 0 }]))
        .save(path)
        .unwrap();
}

#[test]
fn missing_required_flag_exits_with_usage_status() {
    let out = siedob(&["train", "--stage", "BACKGROUND"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--config"));
}

#[test]
fn unknown_flag_exits_with_usage_status() {
    assert_eq!(siedob(&["eval", "--config", "x.json", "--bogus"]).status.code(), Some(2));
    assert_eq!(siedob(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bad_style_syntax_is_a_usage_error() {
    let out = siedob(&[
        "edit", "--image", "a", "--seg", "b", "--mask", "c", "--seed", "0", "--out", "d", "--style", "car",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_one_with_one_line_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = siedob(&["eval", "--config", p(&dir.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("siedob: error:"), "{err}");
}

#[test]
fn empty_mask_edit_copies_input_without_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path(), 1);
    let (image, seg, _) = sample_paths(dir.path());
    let mask = dir.path().join("mask.png");
    write_mask(&mask, 64, |_, _| false);
    let out_path = dir.path().join("out.png");
    let out = siedob(&[
        "edit",
        "--image",
        p(&image),
        "--seg",
        p(&seg),
        "--mask",
        p(&mask),
        "--seed",
        "3",
        "--out",
        p(&out_path),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read(&out_path).unwrap(), std::fs::read(&image).unwrap());
}

#[test]
fn edit_without_checkpoints_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy(dir.path(), 1);
    let (image, seg, _) = sample_paths(dir.path());
    let mask = dir.path().join("mask.png");
    write_mask(&mask, 64, |x, _| x < 10);
    let out = siedob(&[
        "edit", "--image", p(&image), "--seg", p(&seg), "--mask", p(&mask), "--seed", "0", "--out",
        p(&dir.path().join("o.png")), "--config", p(&config),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing checkpoint"), "{}", stderr(&out));
}

/// Every stage for a few steps, then bank, edit and eval through the binary.
#[test]
fn short_training_run_supports_edit_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy(dir.path(), 2);
    for stage in ["BACKGROUND", "OBJECT_INPAINT", "OBJECT_GEN", "FUSION"] {
        let out = siedob(&["train", "--stage", stage, "--config", p(&config), "--steps", "2"]);
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
        let csv = dir.path().join("logs").join(format!("{}.csv", stage.to_ascii_lowercase()));
        let rows = std::fs::read_to_string(&csv).unwrap().lines().count();
        assert_eq!(rows, 1 + 2, "{stage}: header plus one row per step");
    }
    let ckpt = dir.path().join("checkpoints");
    assert!(ckpt.join("manifest.json").exists());
    let out = siedob(&["build-bank", "--config", p(&config)]);
    assert!(out.status.success(), "{}", stderr(&out));

    let (image, seg, inst) = sample_paths(dir.path());
    let mask = dir.path().join("mask.png");
    write_mask(&mask, 64, |x, y| (20..44).contains(&x) && y >= 30);
    let edited = dir.path().join("edited.png");
    // Config comes from the copy stored beside the checkpoints.
    let out = Command::new(env!("CARGO_BIN_EXE_siedob"))
        .args([
            "edit", "--image", p(&image), "--seg", p(&seg), "--mask", p(&mask), "--inst", p(&inst), "--style",
            "car:0", "--seed", "5", "--out", p(&edited),
        ])
        .env("SIEDOB_CHECKPOINT_DIR", &ckpt)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for r in report["instances"].as_array().unwrap() {
        if r["mode"] == "GENERATE" && r["class_name"] == "car" {
            assert_eq!(r["used_style_index"], 0);
        }
    }
    let input = image::open(&image).unwrap().into_rgb8();
    let output = image::open(&edited).unwrap().into_rgb8();
    let m = image::open(&mask).unwrap().into_luma8();
    for (x, y, px) in input.enumerate_pixels() {
        if m.get_pixel(x, y)[0] == 0 {
            assert_eq!(output.get_pixel(x, y), px, "known pixel ({x}, {y}) changed");
        }
    }

    let out = siedob(&["eval", "--config", p(&config)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["metrics"].is_object());
}
