use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mpf_core::fixtures;
use mpf_core::geometry::TriangleMesh;
use mpf_core::io::{self, MeshFormat};

fn mpf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpf")).args(args).current_dir(cwd).env("MPF_THREADS", "1").output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const TINY: &str = r#"{"resolution": 24, "train": {"iterations": 12, "init": {"hidden": 16},
  "batch": {"surface": 32, "near": 32, "far": 16, "ambient": 8},
  "log_every": 4, "checkpoint_every": 0, "snapshot_at": []}}"#;

fn square(z: f64) -> TriangleMesh {
    TriangleMesh {
        vertices: vec![[0.0, 0.0, z], [1.0, 0.0, z], [1.0, 1.0, z], [0.0, 1.0, z]],
        triangles: vec![[0, 1, 2], [0, 2, 3]],
    }
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mpf(&["reconstruct", "does_not_exist.xyz"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("does_not_exist.xyz"));
    let o = mpf(&["reconstruct"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = mpf(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"train": {"iters": 3}}"#).unwrap();
    io::write_points_xyz(&dir.path().join("p.xyz"), &fixtures::sphere(100, 1.0, 1)).unwrap();
    let o = mpf(&["reconstruct", "p.xyz", "--config", "c.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("iters"));
}

#[test]
fn evaluate_reports_scaled_chamfer() {
    let dir = tempfile::tempdir().unwrap();
    io::write_mesh(&dir.path().join("a.obj"), MeshFormat::Obj, &square(0.0)).unwrap();
    io::write_mesh(&dir.path().join("b.ply"), MeshFormat::Ply, &square(0.001)).unwrap();
    let o = mpf(&["evaluate", "a.obj", "a.obj"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert_eq!(text(&o.stdout).trim(), "0.000");
    let o = mpf(&["evaluate", "a.obj", "b.ply", "--csv", "cd.csv"], dir.path());
    assert_eq!(text(&o.stdout).trim(), "1.000");
    assert!(fs::read_to_string(dir.path().join("cd.csv")).unwrap().starts_with("mode,value\nchamfer,"));
    let o = mpf(&["evaluate", "a.obj", "b.ply", "--mode", "p2s"], dir.path());
    assert_eq!(text(&o.stdout).trim(), "1.000");
}

#[test]
fn reconstruct_then_slice() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.json"), TINY).unwrap();
    io::write_points_xyz(&d.join("p.xyz"), &fixtures::sphere(400, 1.0, 2)).unwrap();
    let o = mpf(&["reconstruct", "p.xyz", "--config", "c.json", "--out", "run", "--weights.align", "0"], d);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(1), "{}", text(&o.stderr));
    for f in ["checkpoint.bin", "loss.csv", "config.json", "normalization.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let echoed = fs::read_to_string(d.join("run/config.json")).unwrap();
    assert!(echoed.contains("\"align\": 0.0"));

    let o = mpf(&["slice", "run/checkpoint.bin", "--field", "r", "--res", "32", "--out", "s", "--probe-axis", "x"], d);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let ppm = fs::read(d.join("s/slice.ppm")).unwrap();
    let header = b"P6\n32 32\n255\n";
    assert!(ppm.starts_with(header));
    // r >= 0 everywhere: no pixel leans blue.
    assert!(ppm[header.len()..].chunks(3).all(|c| c[0] >= c[2]));
    assert_eq!(fs::read_to_string(d.join("s/probe.csv")).unwrap().lines().count(), 33);
    assert!(text(&o.stdout).contains("sign changes"));
    assert_eq!(fs::read_to_string(d.join("s/slice.csv")).unwrap().lines().count(), 32);

    let o = mpf(&["slice", "run/checkpoint.bin", "--offset", "3"], d);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_grad_detects_a_corrupted_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["check-grad", "--hidden", "12", "--batch", "16", "--probes", "10"];
    let o = mpf(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}{}", text(&o.stdout), text(&o.stderr));
    assert!(text(&o.stdout).contains("overall PASS"));
    let mut bad = args.to_vec();
    bad.extend(["--corrupt-param", "30"]);
    let o = mpf(&bad, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stdout).contains("overall FAIL"));
    assert!(text(&o.stderr).contains("parameter gradient"));
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.json"), TINY).unwrap();
    let o = mpf(
        &[
            "ablate", "--fixture", "sphere", "--fixture-points", "300", "--config", "c.json", "--out", "abl", "--vary",
            "far=0", "--vary", "lap=10",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let csv = fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "variant,term,multiplier,chamfer,status");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains(",far,0,") && lines[2].contains(",lap,10,"));
    assert!(d.join("abl/variant_00/config.json").exists());
    let echoed = fs::read_to_string(d.join("abl/variant_01/config.json")).unwrap();
    assert!(echoed.contains("\"lap\": 0.004"), "{echoed}");

    let o = mpf(&["ablate", "--fixture", "sphere", "--vary", "far=3"], d);
    assert_eq!(o.status.code(), Some(2));
}
