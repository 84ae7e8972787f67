//! End-to-end checks of the command-line interface.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_objvid"))
}

fn micro_run_config(dataset: &Path, out: &Path) -> serde_json::Value {
    serde_json::json!({
        "model": {
            "scene_dim": 8, "camera_dim": 16, "object_dim": 8,
            "frames": 2, "height": 16, "width": 16,
            "grid_dims": [1, 1, 1], "grid_min": [-1.0, 0.0, 1.0],
            "grid_max": [1.0, 0.8, 3.0], "voxel_res": 4,
            "voxel_extent": 0.8, "bg_rings": 8, "bg_sectors": 16,
            "bg_radius": 4.0, "obj_rings": 8, "obj_sectors": 16,
            "obj_radius": 0.3, "width_mult": 0.25
        },
        "dataset": dataset.display().to_string(),
        "out_dir": out.display().to_string(),
        "batch_size": 1,
        "checkpoint_every": 2
    })
}

fn micro_gen_config() -> &'static str {
    r#"{"height": 16, "width": 16, "frames": 2, "gt_voxel_res": 8,
        "bg_rings": 16, "bg_sectors": 32, "max_objects": 2}"#
}

fn make_micro_dataset(dir: &Path, seed: u64, count: usize) {
    let cfg_path = dir.join("gen.json");
    std::fs::write(&cfg_path, micro_gen_config()).unwrap();
    let out = bin()
        .args([
            "make-dataset",
            "--out",
            dir.join("dataset").to_str().unwrap(),
            "--seed",
            &seed.to_string(),
            "--count",
            &count.to_string(),
            "--config",
            cfg_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn dataset_creation_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    make_micro_dataset(tmp.path(), 9, 4);
    let manifest_a = std::fs::read(tmp.path().join("dataset/manifest.json")).unwrap();
    let frames_a = std::fs::read(tmp.path().join("dataset/seq_000002/frames.o3vt")).unwrap();
    let tmp2 = tempfile::tempdir().unwrap();
    make_micro_dataset(tmp2.path(), 9, 4);
    let manifest_b = std::fs::read(tmp2.path().join("dataset/manifest.json")).unwrap();
    let frames_b = std::fs::read(tmp2.path().join("dataset/seq_000002/frames.o3vt")).unwrap();
    assert_eq!(manifest_a, manifest_b);
    assert_eq!(frames_a, frames_b);
}

#[test]
fn train_smoke_writes_checkpoint_log_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    make_micro_dataset(tmp.path(), 1, 3);
    let run_dir = tmp.path().join("run");
    let cfg = micro_run_config(&tmp.path().join("dataset"), &run_dir);
    let cfg_path = tmp.path().join("run.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = bin()
        .args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--steps",
            "3",
            "--seed",
            "7",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("checkpoint/meta.json").exists());
    assert!(run_dir.join("config.json").exists());
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4, "header + 3 steps:\n{log}");
    assert!(log.starts_with("step,nll,kl,"));
}

#[test]
fn resume_continues_step_numbering() {
    let tmp = tempfile::tempdir().unwrap();
    make_micro_dataset(tmp.path(), 2, 3);
    let run_dir = tmp.path().join("run");
    let cfg = micro_run_config(&tmp.path().join("dataset"), &run_dir);
    let cfg_path = tmp.path().join("run.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let ok = bin()
        .args(["train", "--config", cfg_path.to_str().unwrap(), "--steps", "2", "--seed", "3"])
        .status()
        .unwrap();
    assert!(ok.success());
    let ok = bin()
        .args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--steps",
            "4",
            "--seed",
            "3",
            "--resume",
            run_dir.join("checkpoint").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(ok.success());
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    let steps: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(steps, vec!["0", "1", "2", "3"]);
}

#[test]
fn gradient_aggregation_matches_big_batch() {
    // Aggregation 4 with batch 2 equals batch 8 with aggregation 1: same
    // number of micro-episodes drawn from the same rng stream.
    let tmp = tempfile::tempdir().unwrap();
    make_micro_dataset(tmp.path(), 4, 3);
    let mut run = |name: &str, batch: usize, agg: usize| -> PathBuf {
        let run_dir = tmp.path().join(name);
        let mut cfg = micro_run_config(&tmp.path().join("dataset"), &run_dir);
        cfg["batch_size"] = serde_json::json!(batch);
        cfg["aggregation"] = serde_json::json!(agg);
        cfg["checkpoint_every"] = serde_json::json!(1);
        let cfg_path = tmp.path().join(format!("{name}.json"));
        std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        let ok = bin()
            .args(["train", "--config", cfg_path.to_str().unwrap(), "--steps", "1", "--seed", "5"])
            .status()
            .unwrap();
        assert!(ok.success());
        run_dir.join("checkpoint")
    };
    let a = run("agg", 2, 4);
    let b = run("big", 8, 1);
    // Compare every parameter tensor.
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("params.json")).unwrap()).unwrap();
    for entry in index.as_array().unwrap() {
        let file = format!("{}.value.o3vt", entry["file"].as_str().unwrap());
        let pa = objvid::tensor::load_f64(a.join(&file)).unwrap();
        let pb = objvid::tensor::load_f64(b.join(&file)).unwrap();
        assert!(
            pa.max_abs_diff(&pb) < 1e-5,
            "{file} differs by {}",
            pa.max_abs_diff(&pb)
        );
    }
}

#[test]
fn reconstruct_generate_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    make_micro_dataset(tmp.path(), 6, 3);
    let run_dir = tmp.path().join("run");
    let cfg = micro_run_config(&tmp.path().join("dataset"), &run_dir);
    let cfg_path = tmp.path().join("run.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let ok = bin()
        .args(["train", "--config", cfg_path.to_str().unwrap(), "--steps", "2", "--seed", "1"])
        .status()
        .unwrap();
    assert!(ok.success());
    let ckpt = run_dir.join("checkpoint");

    // Reconstruction panels: all six types per frame plus arrays.
    let rec_dir = tmp.path().join("recon");
    let ok = bin()
        .args([
            "reconstruct",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--dataset",
            tmp.path().join("dataset").to_str().unwrap(),
            "--out",
            rec_dir.to_str().unwrap(),
            "--indices",
            "0",
        ])
        .status()
        .unwrap();
    assert!(ok.success());
    let seq = rec_dir.join("seq_000000");
    for t in 0..2 {
        for panel in ["input", "recon", "background", "foreground", "masks", "depth"] {
            assert!(
                seq.join(format!("{panel}_{t}.ppm")).exists(),
                "missing panel {panel}_{t}"
            );
        }
    }
    assert!(seq.join("boxes.json").exists());
    assert!(seq.join("masks.o3vt").exists());

    // Foreground + transmittance*background recomposes the full frame:
    // checked via stored arrays.
    let recon = objvid::tensor::load_f64(seq.join("recon.o3vt")).unwrap();
    assert!(recon.data().iter().all(|v| (-1e-6..=1.0 + 1e-6).contains(v)));

    // Prior samples are reproducible under a fixed seed.
    let gen1 = tmp.path().join("gen1");
    let gen2 = tmp.path().join("gen2");
    for dir in [&gen1, &gen2] {
        let ok = bin()
            .args([
                "generate",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--out",
                dir.to_str().unwrap(),
                "--seed",
                "12",
                "--count",
                "2",
            ])
            .status()
            .unwrap();
        assert!(ok.success());
    }
    let a = std::fs::read(gen1.join("sample_0000/recon.o3vt")).unwrap();
    let b = std::fs::read(gen2.join("sample_0000/recon.o3vt")).unwrap();
    assert_eq!(a, b);
    assert!(gen1.join("presences.json").exists());

    // Evaluation emits the report with all eight fields.
    let eval_dir = tmp.path().join("eval");
    let out = bin()
        .args([
            "evaluate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--dataset",
            tmp.path().join("dataset").to_str().unwrap(),
            "--split",
            "train",
            "--out",
            eval_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap())
            .unwrap();
    for key in ["fg_iou", "sc", "msc", "sc_track", "msc_track", "mre", "frac125", "ap_3d"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert!(eval_dir.join("metrics_per_sequence.csv").exists());
}

#[test]
fn usage_errors_exit_one() {
    let out = bin().args(["train", "--bogus-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().args(["no-such-command"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    // Config errors also exit 1.
    let out = bin()
        .args(["train", "--dataset", "/nonexistent/nowhere", "--out", "/tmp/x_objvid_usage"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn grad_check_passes_and_exits_zero() {
    let out = bin().args(["grad-check", "--seed", "2"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS"));
    assert!(!text.contains("FAIL"));
}
