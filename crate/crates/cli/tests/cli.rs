//! End-to-end tests of the `pnsr` binary: real process spawns, real files.

use pnsr_core::io;
use pnsr_core::metrics::EvalReport;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn pnsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pnsr"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn run_ok(args: &[&str]) -> String {
    let out = pnsr(args);
    assert!(
        out.status.success(),
        "pnsr {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout is UTF-8")
}

fn exit_code(args: &[&str]) -> i32 {
    pnsr(args).status.code().expect("no signal")
}

/// Tiny dataset all tests share the shape of: 3 scenes, 32x32, x4.
fn synth_into(dir: &Path, seed: u64) {
    run_ok(&[
        "synth",
        "--scenes",
        "3",
        "--scale",
        "4",
        "--seed",
        &seed.to_string(),
        "--width",
        "32",
        "--height",
        "32",
        "--out",
        dir.to_str().unwrap(),
    ]);
}

fn tree_files(root: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth_into(&a, 11);
    synth_into(&b, 11);

    let fa = tree_files(&a);
    let fb = tree_files(&b);
    let rel = |root: &Path, p: &PathBuf| p.strip_prefix(root).unwrap().to_path_buf();
    assert_eq!(
        fa.iter().map(|p| rel(&a, p)).collect::<Vec<_>>(),
        fb.iter().map(|p| rel(&b, p)).collect::<Vec<_>>()
    );
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{x:?} differs");
    }

    // A different seed must actually change the data.
    let c = tmp.path().join("c");
    synth_into(&c, 12);
    let first = |root: &Path| fs::read(root.join("scene_0000/hr_depth.pgm")).unwrap();
    assert_ne!(first(&a), first(&c));
}

#[test]
fn encode_decode_depth_round_trip_stays_within_quantization() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, 3);

    let scene = data.join("scene_0000");
    let enc = tmp.path().join("enc.ppm");
    let dec = tmp.path().join("dec.pgm");
    run_ok(&[
        "encode",
        "--depth",
        scene.join("lr_depth.pgm").to_str().unwrap(),
        "--intrinsics",
        scene.join("lr_intrinsics.json").to_str().unwrap(),
        "--out",
        enc.to_str().unwrap(),
    ]);
    run_ok(&[
        "decode-depth",
        "--in",
        enc.to_str().unwrap(),
        "--out",
        dec.to_str().unwrap(),
    ]);

    let before = io::read_depth16(&scene.join("lr_depth.pgm"), io::DEFAULT_DEPTH_UNIT_SCALE).unwrap();
    let after = io::read_depth16(&dec, io::DEFAULT_DEPTH_UNIT_SCALE).unwrap();
    assert_eq!(before.valid(), after.valid());
    for i in 0..before.data().len() {
        if before.valid()[i] {
            let (x, y) = (before.data()[i], after.data()[i]);
            // One trip through the 16-bit coordinate image costs at most a
            // few quantization steps of 1e-4 m.
            assert!((x - y).abs() <= 3e-4, "pixel {i}: {x} vs {y}");
        }
    }
}

#[test]
fn decode_cloud_writes_parseable_ply() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, 5);

    let ply = tmp.path().join("cloud.ply");
    run_ok(&[
        "decode-cloud",
        "--in",
        data.join("scene_0001/lr_pncc.ppm").to_str().unwrap(),
        "--out",
        ply.to_str().unwrap(),
    ]);
    let cloud = io::read_ply(&ply).unwrap();
    assert!(!cloud.is_empty());
    // Every decoded point came from a valid pixel of an 8x8 input.
    assert!(cloud.len() <= 64);
}

#[test]
fn make_lr_agrees_with_synth_up_to_file_quantization() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, 21);

    let scene = data.join("scene_0002");
    let out = tmp.path().join("mlr");
    run_ok(&[
        "make-lr",
        "--depth",
        scene.join("hr_depth.pgm").to_str().unwrap(),
        "--intrinsics",
        scene.join("hr_intrinsics.json").to_str().unwrap(),
        "--scale",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);

    // synth degraded the exact render; make-lr degrades the 16-bit file.
    // Masks must agree exactly, depths to within the quantization budget.
    let from_synth = io::read_depth16(&scene.join("lr_depth.pgm"), io::DEFAULT_DEPTH_UNIT_SCALE).unwrap();
    let from_cli = io::read_depth16(&out.join("lr_depth.pgm"), io::DEFAULT_DEPTH_UNIT_SCALE).unwrap();
    assert_eq!(from_synth.valid(), from_cli.valid());
    for i in 0..from_synth.data().len() {
        if from_synth.valid()[i] {
            let (x, y) = (from_synth.data()[i], from_cli.data()[i]);
            assert!((x - y).abs() <= 3e-4, "pixel {i}: {x} vs {y}");
        }
    }
    assert_eq!(
        fs::read(scene.join("lr_intrinsics.json")).unwrap(),
        fs::read(out.join("lr_intrinsics.json")).unwrap()
    );
}

#[test]
fn train_is_byte_identical_across_runs_and_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, 31);

    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "train",
            "--data",
            data.to_str().unwrap(),
            "--epochs",
            "2",
            "--channels",
            "8",
            "--layers",
            "3",
            "--patch",
            "8",
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        run_ok(&args);
    };
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    train(&a, &[]);
    train(&b, &[]);
    train(&c, &["--threads", "1"]);

    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "model.pnsr"), read(&b, "model.pnsr"));
    assert_eq!(read(&a, "loss.csv"), read(&b, "loss.csv"));
    // Worker count must not leak into the arithmetic.
    assert_eq!(read(&a, "model.pnsr"), read(&c, "model.pnsr"));

    let csv = String::from_utf8(read(&a, "loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,loss"));
    // Pre-training entry plus one per epoch.
    assert_eq!(lines.count(), 3);
}

#[test]
fn eval_reports_parse_and_rerun_identically() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, 41);
    let run_dir = tmp.path().join("run");
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "1",
        "--channels",
        "8",
        "--layers",
        "3",
        "--patch",
        "8",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    let ckpt = run_dir.join("model.pnsr");

    let base = run_ok(&["eval", "--data", data.to_str().unwrap(), "--baseline", "bicubic"]);
    let report = EvalReport::from_json_lines(&base).unwrap();
    assert_eq!(report.per_frame.len(), 3);
    assert_eq!(report.params, 0);
    assert!(report.per_frame.iter().all(|f| f.time_s == 0.0));

    let out_file = tmp.path().join("eval.jsonl");
    let net1 = run_ok(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out_file.to_str().unwrap(),
    ]);
    // The file is the stdout stream, byte for byte.
    assert_eq!(net1, fs::read_to_string(&out_file).unwrap());
    let net_report = EvalReport::from_json_lines(&net1).unwrap();
    assert!(net_report.params > 0);

    let net2 = run_ok(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(net1, net2);

    // --timing fills time_s without disturbing the metrics.
    let timed = run_ok(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--baseline",
        "bicubic",
        "--timing",
    ]);
    let timed_report = EvalReport::from_json_lines(&timed).unwrap();
    assert!(timed_report.per_frame.iter().all(|f| f.time_s > 0.0));
    for (t, u) in timed_report.per_frame.iter().zip(&report.per_frame) {
        assert_eq!(t.rmse_cm.to_bits(), u.rmse_cm.to_bits());
        assert_eq!(t.chamfer.to_bits(), u.chamfer.to_bits());
    }
}

#[test]
fn ablate_emits_exactly_four_rows_deterministically() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, 51);

    let run_ablate = |out: &Path| {
        run_ok(&[
            "ablate",
            "--data",
            data.to_str().unwrap(),
            "--epochs",
            "1",
            "--channels",
            "4",
            "--layers",
            "2",
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let stdout_a = run_ablate(&a);
    let stdout_b = run_ablate(&b);
    assert_eq!(stdout_a, stdout_b);

    let csv = fs::read_to_string(a.join("ablate.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("ablate.csv")).unwrap());

    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "head,input,rmse_cm,chamfer,params");
    assert_eq!(lines.len(), 5, "header plus one row per grid cell");
    let combos: Vec<(&str, &str)> = lines[1..]
        .iter()
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap(), f.next().unwrap())
        })
        .collect();
    assert_eq!(
        combos,
        [("xyz", "pncc"), ("xyz", "depth"), ("z", "pncc"), ("z", "depth")]
    );
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 5);
        assert!(fields[2].parse::<f64>().unwrap().is_finite());
        assert!(fields[3].parse::<f64>().unwrap().is_finite());
        assert!(fields[4].parse::<usize>().unwrap() > 0);
    }
}

#[test]
fn bench_emits_stats_for_both_paths() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth_into(&data, 61);
    let run_dir = tmp.path().join("run");
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "1",
        "--channels",
        "4",
        "--layers",
        "2",
        "--patch",
        "8",
        "--out",
        run_dir.to_str().unwrap(),
    ]);

    let out = run_ok(&[
        "bench",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        run_dir.join("model.pnsr").to_str().unwrap(),
        "--frames",
        "2",
        "--warmup",
        "1",
        "--reps",
        "3",
    ]);
    let rows: Vec<serde_json::Value> = out
        .lines()
        .map(|l| serde_json::from_str(l).expect("bench emits JSON lines"))
        .collect();
    assert_eq!(rows.len(), 4, "two frames, two paths each");
    for row in &rows {
        assert!(row["median_s"].as_f64().unwrap() > 0.0);
        assert!(row["mean_s"].as_f64().unwrap() > 0.0);
    }
    let params: Vec<u64> = rows.iter().map(|r| r["params"].as_u64().unwrap()).collect();
    assert_eq!(params[0], 0);
    assert!(params[1] > 0);
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = TempDir::new().unwrap();

    // 0: help and version.
    assert_eq!(exit_code(&["--help"]), 0);
    assert_eq!(exit_code(&["synth", "--help"]), 0);
    assert_eq!(exit_code(&["--version"]), 0);

    // 1: usage errors, caught before any work happens.
    assert_eq!(exit_code(&["frobnicate"]), 1);
    assert_eq!(exit_code(&["synth", "--scenes", "1", "--scale", "3", "--out", "x"]), 1);
    assert_eq!(exit_code(&["eval", "--data", "x"]), 1, "a source is required");
    assert_eq!(exit_code(&["--threads", "0", "synth", "--scenes", "0", "--out", "x"]), 1);

    // 2: well-formed invocation, bad data.
    let missing = tmp.path().join("nothing");
    assert_eq!(
        exit_code(&["eval", "--data", missing.to_str().unwrap(), "--baseline", "bicubic"]),
        2
    );
    let garbage = tmp.path().join("garbage.ppm");
    fs::write(&garbage, b"not a coordinate image").unwrap();
    let out = tmp.path().join("d.pgm");
    assert_eq!(
        exit_code(&["decode-depth", "--in", garbage.to_str().unwrap(), "--out", out.to_str().unwrap()]),
        2
    );

    // 3: numeric failure, here a checkpoint whose blob holds a NaN.
    let data = tmp.path().join("data");
    synth_into(&data, 71);
    let run_dir = tmp.path().join("run");
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "0",
        "--channels",
        "4",
        "--layers",
        "2",
        "--patch",
        "8",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    let mut bytes = fs::read(run_dir.join("model.pnsr")).unwrap();
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    let nan_ckpt = tmp.path().join("nan.pnsr");
    fs::write(&nan_ckpt, bytes).unwrap();
    assert_eq!(
        exit_code(&[
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            nan_ckpt.to_str().unwrap(),
        ]),
        3
    );
}

#[test]
fn every_flag_of_every_subcommand_is_documented() {
    let subcommands = [
        "synth",
        "make-lr",
        "encode",
        "decode-depth",
        "decode-cloud",
        "train",
        "eval",
        "bench",
        "ablate",
    ];
    // Top-level help must list every subcommand.
    let top = run_ok(&["--help"]);
    for sub in subcommands {
        assert!(top.contains(sub), "top-level help misses {sub}");
    }

    for sub in subcommands {
        let help = run_ok(&[sub, "-h"]);
        for line in help.lines() {
            let t = line.trim_start();
            if !t.starts_with('-') {
                continue;
            }
            // An option row reads "--flag <VALUE>  description"; require
            // prose after the flag tokens.
            let desc = t
                .split("  ")
                .skip(1)
                .map(str::trim)
                .find(|s| !s.is_empty())
                .unwrap_or("");
            assert!(
                desc.chars().any(|c| c.is_alphabetic()),
                "{sub}: undocumented flag row: {line:?}"
            );
        }
    }
}
