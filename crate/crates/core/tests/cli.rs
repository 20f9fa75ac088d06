//! End-to-end runs of the subcommands on synthetic datasets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use scalerec::cli::io::read_poses;
use scalerec::cli::{exit, main_with_args, run, Cli, CliError};

use clap::Parser;

fn write_json(path: &Path, json: &str) -> PathBuf {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, json).unwrap();
    path.to_path_buf()
}

fn scalerec(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("scalerec").chain(args.iter().copied()))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Rows of a CSV file as string vectors, header excluded.
fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::Reader::from_path(p).unwrap();
    reader.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect()
}

fn summary(p: &Path) -> Vec<String> {
    csv_rows(p).pop().unwrap()
}

fn generate(dir: &Path, json: &str) -> PathBuf {
    let config = write_json(&dir.join("gen.json"), json);
    let data = dir.join("data");
    assert_eq!(scalerec(&["synth-gen", "--config", path(&config), "--output", path(&data)]), exit::OK);
    data
}

const LONG_DRIVE: &str = r#"{"misscale": 2.0, "scene": {"frames": 121, "backdrop_distance": 250.0,
    "motion": {"forward": 1.0, "yaw": 0.0008726646259971648},
    "obstacles": [{"center_x": 6.0, "center_z": 60.0, "size_x": 2.0, "size_z": 4.0, "height": 2.0}]}}"#;

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_gen_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_json(&tmp.path().join("gen.json"), r#"{"scene": {"noise_sigma": 0.01}}"#);
    for (dir, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        let out = tmp.path().join(dir);
        assert_eq!(
            scalerec(&["synth-gen", "--config", path(&config), "--output", path(&out), "--seed", seed]),
            exit::OK
        );
    }
    let (a, b, c) = (tree_bytes(&tmp.path().join("a")), tree_bytes(&tmp.path().join("b")), tree_bytes(&tmp.path().join("c")));
    assert_eq!(a, b);
    assert_eq!(a.len(), c.len());
    assert_ne!(a, c);
    let names: Vec<String> = a.iter().map(|(p, _)| p.display().to_string()).collect();
    for expected in ["scene.json", "poses.txt", "image/000000.pfm", "depth/000004.pfm", "mask/000000.pgm", "prediction/depth/000000.pfm", "prediction/poses.txt"] {
        assert!(names.contains(&expected.to_string()), "missing {expected}");
    }
}

#[test]
fn estimate_scale_recovers_the_misscale() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), r#"{"misscale": 2.0}"#);
    let both = write_json(&tmp.path().join("pred.json"), r#"{"dataset": "data", "predictions": "data/prediction"}"#);
    let truth = write_json(&tmp.path().join("truth.json"), r#"{"dataset": "data"}"#);
    let out = tmp.path().join("out");

    assert_eq!(scalerec(&["estimate-scale", "--config", path(&both), "--output", path(&out)]), exit::OK);
    let rows = csv_rows(&out.join("scale.csv"));
    assert_eq!(rows.len(), 6);
    let last = rows.last().unwrap();
    assert_eq!(last[0], "summary");
    let mean: f64 = last[5].parse().unwrap();
    assert!((mean - 0.5).abs() <= 0.01, "mean {mean}");

    for mode in ["weighted-ls", "median"] {
        assert_eq!(
            scalerec(&["estimate-scale", "--config", path(&truth), "--output", path(&out), "--mode", mode]),
            exit::OK
        );
        let s = summary(&out.join("scale.csv"));
        let (mean, std): (f64, f64) = (s[5].parse().unwrap(), s[7].parse().unwrap());
        assert!((mean - 1.0).abs() <= 0.02 && std <= 1e-6, "{mode}: mean {mean} std {std}");
    }

    assert_eq!(scalerec(&["fit-plane", "--config", path(&truth), "--output", path(&out)]), exit::OK);
    let first = &csv_rows(&out.join("planes.csv"))[0];
    let ny: f64 = first[2].parse().unwrap();
    let h: f64 = first[4].parse().unwrap();
    assert!((ny - 1.0).abs() < 1e-6 && (h - 1.7).abs() < 1e-5, "normal_y {ny} height {h}");
    let _ = data;
}

#[test]
fn empty_dataset_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir_all(tmp.path().join("data/depth")).unwrap();
    let config = write_json(
        &tmp.path().join("run.json"),
        r#"{"dataset": "data", "intrinsics": {"fu": 100, "fv": 100, "cu": 10, "cv": 5, "width": 20, "height": 10}}"#,
    );
    let cli = Cli::try_parse_from(["scalerec", "estimate-scale", "--config", path(&config)]).unwrap();
    let err = run(&cli).unwrap_err();
    assert!(matches!(err, CliError::EmptyDataset(_)), "{err}");
    assert!(err.to_string().contains("no frames"));
    assert_eq!(err.exit_code(), exit::IO);
}

#[test]
fn config_errors_have_their_own_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_json(&tmp.path().join("bad.json"), r#"{"camera_heigth": 1.7}"#);
    assert_eq!(scalerec(&["fit-plane", "--config", path(&config)]), exit::CONFIG);
    let config = write_json(&tmp.path().join("missing.json"), r#"{"dataset": "nowhere"}"#);
    assert_eq!(scalerec(&["fit-plane", "--config", path(&config)]), exit::CONFIG);
    assert_eq!(scalerec(&["demo-converge", "--mode", "sometimes"]), exit::CONFIG);
    assert_eq!(scalerec(&["no-such-command"]), exit::CONFIG);
}

#[test]
fn binary_reports_exit_statuses() {
    let bin = env!("CARGO_BIN_EXE_scalerec");
    let tmp = tempfile::tempdir().unwrap();
    let config = write_json(&tmp.path().join("bad.json"), r#"{"unknown": 1}"#);
    let status = Command::new(bin).args(["fit-plane", "--config", path(&config)]).status().unwrap();
    assert_eq!(status.code(), Some(exit::CONFIG));
    let out = tmp.path().join("data");
    let status = Command::new(bin)
        .args(["synth-gen", "--output", path(&out)])
        .env("SCALEREC_LOG", "debug")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(exit::OK));
    assert!(out.join("scene.json").exists());
}

#[test]
fn rescale_odometry_removes_the_scale_error() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), LONG_DRIVE);
    let config = write_json(
        &tmp.path().join("run.json"),
        r#"{"dataset": "data", "predictions": "data/prediction", "segment_lengths": [100]}"#,
    );
    let out = tmp.path().join("out");
    assert_eq!(scalerec(&["rescale-odometry", "--config", path(&config), "--output", path(&out)]), exit::OK);
    let rows = csv_rows(&out.join("segment_errors.csv"));
    let error = |stage: &str| -> f64 {
        rows.iter().find(|r| r[0] == stage && r[1] == "all").unwrap()[2].parse().unwrap()
    };
    assert!(error("before") > 99.0);
    assert!(error("after") < 1.0, "after {}", error("after"));
    assert_eq!(read_poses(&out.join("poses_rescaled.txt")).unwrap().len(), 121);

    assert_eq!(scalerec(&["eval-odometry", "--config", path(&config), "--output", path(&out)]), exit::OK);
    let rows = csv_rows(&out.join("segment_errors.csv"));
    assert_eq!(rows.last().unwrap()[0], "estimate");
}

#[test]
fn unit_scales_leave_poses_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), &LONG_DRIVE.replace(r#""misscale": 2.0"#, r#""misscale": 1.0"#));
    let config = write_json(
        &tmp.path().join("run.json"),
        r#"{"dataset": "data", "estimated_poses": "data/poses.txt", "segment_lengths": [100]}"#,
    );
    let out = tmp.path().join("out");
    assert_eq!(scalerec(&["rescale-odometry", "--config", path(&config), "--output", path(&out)]), exit::OK);
    let before = read_poses(&data.join("poses.txt")).unwrap();
    let after = read_poses(&out.join("poses_rescaled.txt")).unwrap();
    for (a, b) in before.poses().iter().zip(after.poses()) {
        let (a, b) = (a.to_row_major_3x4(), b.to_row_major_3x4());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{x} vs {y}");
        }
    }
}

#[test]
fn frame_count_mismatch_names_both_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), r#"{"scene": {"frames": 4}}"#);
    let poses = fs::read_to_string(data.join("poses.txt")).unwrap();
    let short: Vec<&str> = poses.lines().take(3).collect();
    fs::write(tmp.path().join("short.txt"), short.join("\n")).unwrap();
    let config = write_json(&tmp.path().join("run.json"), r#"{"dataset": "data", "estimated_poses": "short.txt"}"#);
    let cli = Cli::try_parse_from(["scalerec", "rescale-odometry", "--config", path(&config)]).unwrap();
    let err = run(&cli).unwrap_err().to_string();
    assert!(err.contains('3') && err.contains('4'), "{err}");

    fs::write(tmp.path().join("short.txt"), format!("{}\n1 0 0\n", short[0])).unwrap();
    let cli = Cli::try_parse_from(["scalerec", "eval-odometry", "--config", path(&config)]).unwrap();
    let err = run(&cli).unwrap_err();
    assert!(matches!(err, CliError::Parse { line: 2, .. }), "{err}");
}

#[test]
fn eval_depth_scalings() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), r#"{"misscale": 2.0, "scene": {"frames": 3}}"#);
    let same = write_json(&tmp.path().join("same.json"), r#"{"dataset": "data", "predictions": "data"}"#);
    let doubled = write_json(&tmp.path().join("double.json"), r#"{"dataset": "data", "predictions": "data/prediction"}"#);
    let out = tmp.path().join("out");
    let metrics = |config: &Path, mode: &str| -> Vec<f64> {
        assert_eq!(
            scalerec(&["eval-depth", "--config", path(config), "--output", path(&out), "--mode", mode]),
            exit::OK
        );
        summary(&out.join("depth_metrics.csv"))[2..].iter().map(|x| x.parse().unwrap()).collect()
    };
    let m = metrics(&same, "none");
    assert!(m[..4].iter().all(|x| *x == 0.0) && m[4..].iter().all(|x| (x - 1.0).abs() < 1e-12), "{m:?}");
    let m = metrics(&doubled, "gt-median");
    assert!(m[..4].iter().all(|x| x.abs() < 1e-6), "{m:?}");
    let m = metrics(&doubled, "cam-height");
    assert!(m[0] <= 0.02, "abs_rel {}", m[0]);
    let m = metrics(&doubled, "none");
    assert!((m[0] - 1.0).abs() < 1e-6);
}

#[test]
fn segment_ground_writes_masks() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), r#"{"scene": {"frames": 2}}"#);
    let config = write_json(&tmp.path().join("run.json"), r#"{"dataset": "data"}"#);
    let out = tmp.path().join("seg");
    assert_eq!(scalerec(&["segment-ground", "--config", path(&config), "--output", path(&out)]), exit::OK);
    assert!(out.join("mask/000001.pgm").exists());
    for row in csv_rows(&out.join("segmentation.csv")) {
        let iou: f64 = row[11].parse().unwrap();
        assert!(iou >= 0.9, "iou {iou}");
    }

    let irls = write_json(&tmp.path().join("irls.json"), r#"{"dataset": "data", "ground_masks": "irls"}"#);
    assert_eq!(scalerec(&["estimate-scale", "--config", path(&irls), "--output", path(&out)]), exit::OK);
    let mean: f64 = summary(&out.join("scale.csv"))[5].parse().unwrap();
    assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
}

#[test]
fn demo_converge_and_ablate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("demo");
    let final_scale = |file: &Path| -> f64 { csv_rows(file).last().unwrap()[1].parse().unwrap() };

    assert_eq!(scalerec(&["demo-converge", "--output", path(&out)]), exit::OK);
    let first = fs::read(out.join("trace.csv")).unwrap();
    assert!((final_scale(&out.join("trace.csv")) - 1.0).abs() <= 0.02);
    assert_eq!(csv_rows(&out.join("trace.csv")).len(), 501);

    assert_eq!(scalerec(&["demo-converge", "--output", path(&out), "--jobs", "1"]), exit::OK);
    assert_eq!(fs::read(out.join("trace.csv")).unwrap(), first, "re-run differs");

    let config = write_json(&tmp.path().join("short.json"), r#"{"demo": {"steps": 20}}"#);
    assert_eq!(scalerec(&["ablate", "--config", path(&config), "--output", path(&out)]), exit::OK);
    let rows = csv_rows(&out.join("ablation.csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["none", "ts-only", "ds-only", "ts+ds"]);
    for name in names {
        assert_eq!(csv_rows(&out.join(format!("trace_{name}.csv"))).len(), 21);
    }
}

#[test]
fn unscaled_variant_stays_misscaled() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("demo");
    assert_eq!(scalerec(&["demo-converge", "--output", path(&out), "--mode", "none"]), exit::OK);
    let last: f64 = csv_rows(&out.join("trace.csv")).last().unwrap()[1].parse().unwrap();
    assert!((last - 1.0).abs() > 0.5, "s = {last}");
}
