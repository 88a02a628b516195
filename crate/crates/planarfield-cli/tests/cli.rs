//! End-to-end tests driving the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use planarfield::field::load_grid;
use planarfield::geometry::{Camera, DisparitySet};
use planarfield::imageio::write_ppm;
use planarfield::renderer::render_source;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_planarfield"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Two-view scene small enough for sub-second fits.
fn tiny_scene(dir: &Path) -> std::path::PathBuf {
    let spec = r#"{
  "scene": {
    "range": {"z_near": 2.0, "z_far": 6.0},
    "rects": [
      {"center": [0.0, 0.0, 4.0], "u": [6.0, 0.0, 0.0], "v": [0.0, 6.0, 0.0],
       "texture": {"type": "checker", "cells": 4,
                   "c0": [0.3, 0.4, 0.6], "c1": [0.7, 0.6, 0.4]},
       "opacity": {"type": "opaque"}}
    ]
  },
  "camera": {"fx": 16.0, "fy": 16.0, "cx": 7.5, "cy": 7.5, "width": 16, "height": 16},
  "views": [
    {"R": [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], "t": [0.0, 0.0, 0.0]},
    {"R": [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], "t": [0.2, 0.0, 0.0]}
  ],
  "emit": {"points_per_view": 32, "seed": 0, "samples_per_ray": 200, "threads": 1}
}
"#;
    let path = dir.join("scene.json");
    fs::write(&path, spec).unwrap();
    path
}

fn tiny_fit_config(dir: &Path, iterations: u32) -> std::path::PathBuf {
    let cfg = format!(
        r#"{{
  "planes_per_step": 2, "grid_slices": 4, "height": 16, "width": 16,
  "range": {{"z_near": 2.0, "z_far": 6.0}},
  "weights": {{"l1": 1.0, "ssim": 0.0, "smooth": 0.1, "sparse": 1.0}},
  "iterations": {iterations}, "learning_rate": 0.01, "seed": 0,
  "scale_mode": "fixed", "sampling_mode": "bin_edges",
  "eval_stride": 100, "deterministic": true
}}
"#
    );
    let path = dir.join("fit.json");
    fs::write(&path, cfg).unwrap();
    path
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn gen_scene_writes_dataset_and_repeats_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tiny_scene(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");

    let out = run(&["gen-scene", spec.to_str().unwrap(), a.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("camera.json"));
    assert!(text.contains("view_1_pose.json"));
    for name in [
        "camera.json",
        "view_0.ppm",
        "view_0_depth.pfm",
        "view_0_pose.json",
        "points_0.json",
        "view_1.ppm",
    ] {
        assert!(a.join(name).exists(), "missing {name}");
    }

    let out2 = run(&["gen-scene", spec.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(out2.status.success());
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn gen_scene_rejects_depth_outside_range() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("bad.json");
    fs::write(
        &spec,
        r#"{
  "scene": {
    "range": {"z_near": 2.0, "z_far": 6.0},
    "rects": [
      {"center": [0.0, 0.0, 9.0], "u": [2.0, 0.0, 0.0], "v": [0.0, 2.0, 0.0],
       "texture": {"type": "gradient", "axis": "u",
                   "from": [0.0, 0.0, 0.0], "to": [1.0, 1.0, 1.0]},
       "opacity": {"type": "opaque"}}
    ]
  },
  "camera": {"fx": 8.0, "fy": 8.0, "cx": 3.5, "cy": 3.5, "width": 8, "height": 8},
  "views": [{"R": [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], "t": [0.0, 0.0, 0.0]}]
}
"#,
    )
    .unwrap();
    let out = run(&[
        "gen-scene",
        spec.to_str().unwrap(),
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("rects[0].center"), "{}", stderr(&out));
}

#[test]
fn gen_scene_names_json_path_on_schema_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("typo.json");
    fs::write(
        &spec,
        r#"{
  "scene": {
    "range": {"z_near": 2.0, "z_far": 6.0},
    "rects": [
      {"center": [0.0, 0.0, 4.0], "u": [2.0, 0.0, 0.0], "v": [0.0, 2.0, 0.0],
       "texture": {"type": "checker", "cellz": 4,
                   "c0": [0.0, 0.0, 0.0], "c1": [1.0, 1.0, 1.0]},
       "opacity": {"type": "opaque"}}
    ]
  },
  "camera": {"fx": 8.0, "fy": 8.0, "cx": 3.5, "cy": 3.5, "width": 8, "height": 8},
  "views": [{"R": [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], "t": [0.0, 0.0, 0.0]}]
}
"#,
    )
    .unwrap();
    let out = run(&[
        "gen-scene",
        spec.to_str().unwrap(),
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr(&out);
    assert!(err.contains("rects[0]"), "{err}");
    assert!(err.contains("cellz"), "{err}");
}

#[test]
fn fit_render_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tiny_scene(tmp.path());
    let ds = tmp.path().join("ds");
    assert!(run(&["gen-scene", spec.to_str().unwrap(), ds.to_str().unwrap()]).status.success());

    let cfg = tiny_fit_config(tmp.path(), 20);
    let fit_dir = tmp.path().join("fit");
    let out = run(&[
        "fit",
        cfg.to_str().unwrap(),
        ds.to_str().unwrap(),
        fit_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("fit: 20 iterations over 2 views, seed 0"));
    let ckpt = fit_dir.join("checkpoint.minegrid");
    assert!(ckpt.exists());
    assert!(fit_dir.join("checkpoint.json").exists());
    assert!(fit_dir.join("report.jsonl").exists());

    // Rendering every slice at its own disparity reproduces the plain
    // source pass byte for byte.
    let render_dir = tmp.path().join("render");
    let out = run(&[
        "render",
        ckpt.to_str().unwrap(),
        ds.join("camera.json").to_str().unwrap(),
        ds.join("view_0_pose.json").to_str().unwrap(),
        render_dir.to_str().unwrap(),
        "--n-planes",
        "4",
        "--mode",
        "bin-edges",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("4 planes, 5 decoder-equivalent forward passes"));

    let grid = load_grid(&ckpt).unwrap();
    let cam = Camera { fx: 16.0, fy: 16.0, cx: 7.5, cy: 7.5, width: 16, height: 16 };
    let ds_slices = DisparitySet::new(grid.slice_disparities().to_vec()).unwrap();
    let (reference, _) = render_source(&grid, &cam, &ds_slices).unwrap();
    let expected_dir = tmp.path().join("expected");
    fs::create_dir(&expected_dir).unwrap();
    write_ppm(&expected_dir.join("rgb.ppm"), &reference.rgb).unwrap();
    assert_eq!(
        fs::read(render_dir.join("rgb.ppm")).unwrap(),
        fs::read(expected_dir.join("rgb.ppm")).unwrap()
    );
    assert!(render_dir.join("depth.pfm").exists());
    assert!(render_dir.join("weightsum.pfm").exists());

    // Evaluating a directory against itself hits the MSE==0 sentinel.
    let metrics_path = tmp.path().join("metrics.json");
    let out = run(&[
        "eval",
        ds.to_str().unwrap(),
        ds.to_str().unwrap(),
        "--out",
        metrics_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("mean over 2 views: psnr 99.0000 dB, ssim 1.000000"));
    let metrics: serde_json::Value =
        serde_json::from_slice(&fs::read(&metrics_path).unwrap()).unwrap();
    assert_eq!(metrics["mean_ssim"], 1.0);
    assert_eq!(metrics["views"].as_array().unwrap().len(), 2);
}

#[test]
fn fit_is_byte_reproducible_with_deterministic_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tiny_scene(tmp.path());
    let ds = tmp.path().join("ds");
    assert!(run(&["gen-scene", spec.to_str().unwrap(), ds.to_str().unwrap()]).status.success());
    let cfg = tiny_fit_config(tmp.path(), 10);

    let a = tmp.path().join("fa");
    let b = tmp.path().join("fb");
    for dir in [&a, &b] {
        let out = run(&[
            "--deterministic",
            "fit",
            cfg.to_str().unwrap(),
            ds.to_str().unwrap(),
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn render_rejects_more_planes_than_slices() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tiny_scene(tmp.path());
    let ds = tmp.path().join("ds");
    assert!(run(&["gen-scene", spec.to_str().unwrap(), ds.to_str().unwrap()]).status.success());
    let cfg = tiny_fit_config(tmp.path(), 2);
    let fit_dir = tmp.path().join("fit");
    assert!(
        run(&[
            "fit",
            cfg.to_str().unwrap(),
            ds.to_str().unwrap(),
            fit_dir.to_str().unwrap()
        ])
        .status
        .success()
    );

    let out = run(&[
        "render",
        fit_dir.join("checkpoint.minegrid").to_str().unwrap(),
        ds.join("camera.json").to_str().unwrap(),
        ds.join("view_0_pose.json").to_str().unwrap(),
        tmp.path().join("r").to_str().unwrap(),
        "--n-planes",
        "9",
        "--mode",
        "bin-edges",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("exceeds"), "{}", stderr(&out));

    let out = run(&[
        "render",
        fit_dir.join("checkpoint.minegrid").to_str().unwrap(),
        ds.join("camera.json").to_str().unwrap(),
        ds.join("view_0_pose.json").to_str().unwrap(),
        tmp.path().join("r2").to_str().unwrap(),
        "--n-planes",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_rejects_mismatched_inventories() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tiny_scene(tmp.path());
    let ds = tmp.path().join("ds");
    assert!(run(&["gen-scene", spec.to_str().unwrap(), ds.to_str().unwrap()]).status.success());
    let partial = tmp.path().join("partial");
    fs::create_dir(&partial).unwrap();
    fs::copy(ds.join("view_0.ppm"), partial.join("view_0.ppm")).unwrap();

    let out = run(&["eval", partial.to_str().unwrap(), ds.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("only in"), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_clean_and_fails_corrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("gradcheck.json");
    let out = run(&[
        "gradcheck",
        "--size",
        "6",
        "--max-params",
        "64",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("gradcheck: PASS"));
    let parsed: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(parsed["pass"], true);
    assert!(parsed["checked"].as_u64().unwrap() > 0);

    let out = run(&["gradcheck", "--size", "6", "--max-params", "16", "--corrupt"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stdout(&out).contains("gradcheck: FAIL"));
}
