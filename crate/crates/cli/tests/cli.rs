use std::path::Path;
use std::process::{Command, Output};

use roomroam_core::dataset::{read_dataset, write_dataset, Sample, Split};
use roomroam_core::layout::sample_layout;
use serde_json::Value;

fn roomroam(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roomroam"))
        .args(args)
        .current_dir(dir)
        .env_remove("ROOMROAM_MODEL")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = roomroam(args, dir);
    assert!(
        out.status.success(),
        "roomroam {}: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

fn samples(dir: &Path, name: &str) -> Vec<Sample> {
    read_dataset(read(dir, name).as_slice()).unwrap()
}

fn short_sim(dir: &Path, distance: f64) {
    std::fs::write(dir.join("sim.toml"), format!("episode_distance = {distance}\n")).unwrap();
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec![],
        vec!["teleport"],
        vec!["gen", "--seed", "1", "--out", "x.jsonl"],
        vec!["gen", "--counts", "3:x", "--seed", "1", "--out", "x.jsonl"],
        vec!["gen", "--counts", "7:10", "--seed", "1", "--out", "x.jsonl"],
        vec!["eval", "--model", "m", "--dataset", "d", "--split", "holdout"],
        vec!["simulate", "--layouts", "l", "--seed", "1", "--out", "o", "--ratios", "1:2"],
    ] {
        let out = roomroam(&args, dir.path());
        assert_eq!(out.status.code(), Some(2), "args {args:?}");
    }
}

#[test]
fn runtime_errors_exit_with_1_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = roomroam(&["analyze", "--dataset", "missing.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let err: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(err["code"], "io");
    assert!(err["message"].as_str().unwrap().contains("missing.jsonl"));

    std::fs::write(dir.path().join("bad.json"), r#"{"room":{"width_m":5,"height_m":5},"objects":[{"kind":"bed","center_m":[1,1],"rotation_deg":0}]}"#).unwrap();
    std::fs::write(dir.path().join("m.bin"), b"RRVT").unwrap();
    let out = roomroam(&["predict", "--model", "m.bin", "--layout", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let err: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(err["code"], "service");
}

#[test]
fn commands_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    short_sim(d, 30.0);
    ok(&["gen", "--counts", "3:4,4:3,5:3", "--seed", "5", "--out", "a.jsonl"], d);
    ok(&["gen", "--counts", "3:4,4:3,5:3", "--seed", "5", "--out", "b.jsonl"], d);
    assert_eq!(read(d, "a.jsonl"), read(d, "b.jsonl"));
    ok(&["gen", "--counts", "3:4,4:3,5:3", "--seed", "6", "--out", "c.jsonl"], d);
    assert_ne!(read(d, "a.jsonl"), read(d, "c.jsonl"));

    let sim = |layouts: &str, out: &str| {
        ok(
            &["simulate", "--layouts", layouts, "--paths", "2", "--seed", "9", "--sim-config", "sim.toml", "--out", out],
            d,
        )
    };
    sim("a.jsonl", "s1.jsonl");
    sim("a.jsonl", "s2.jsonl");
    assert_eq!(read(d, "s1.jsonl"), read(d, "s2.jsonl"));

    ok(
        &[
            "build-dataset", "--counts", "3:4,4:3,5:3", "--paths", "2", "--seed", "5",
            "--split-seed", "9", "--sim-config", "sim.toml", "--out", "fused.jsonl",
        ],
        d,
    );
    ok(
        &["simulate", "--layouts", "a.jsonl", "--paths", "2", "--seed", "5", "--split-seed", "9", "--sim-config", "sim.toml", "--out", "staged.jsonl"],
        d,
    );
    assert_eq!(read(d, "fused.jsonl"), read(d, "staged.jsonl"));

    let s = samples(d, "s1.jsonl");
    assert_eq!(s.len(), 10);
    let count = |split| s.iter().filter(|x| x.split == split).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (6, 2, 2));
}

#[test]
fn trace_matches_the_first_recorded_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    short_sim(d, 40.0);
    ok(&["gen", "--counts", "4:2", "--seed", "1", "--out", "l.jsonl"], d);
    ok(
        &["simulate", "--layouts", "l.jsonl", "--paths", "3", "--seed", "4", "--sim-config", "sim.toml", "--out", "d.jsonl", "--trace-dir", "traces"],
        d,
    );
    for s in samples(d, "d.jsonl") {
        let csv = String::from_utf8(read(d, &format!("traces/{}.csv", s.id))).unwrap();
        assert!(csv.starts_with("step,phys_x,phys_y,virt_x,virt_y,resets\n"));
        let last: u32 = csv.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(last, s.per_path_resets[0], "{}", s.id);
    }
}

#[test]
fn protocol_shaped_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    short_sim(d, 5.0);
    ok(&["gen", "--counts", "3:100,4:100,5:100", "--seed", "1", "--out", "l.jsonl"], d);
    ok(
        &["simulate", "--layouts", "l.jsonl", "--paths", "30", "--seed", "2", "--sim-config", "sim.toml", "--out", "d.jsonl"],
        d,
    );
    let text = String::from_utf8(read(d, "d.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 301);
    let s = samples(d, "d.jsonl");
    assert_eq!(s.len(), 300);
    assert!(s.iter().all(|x| x.per_path_resets.len() == 30));
}

#[test]
fn analyze_identical_groups() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut all = Vec::new();
    for n in [3, 4, 5] {
        for (i, counts) in [vec![10, 12], vec![20, 22], vec![30, 32]].into_iter().enumerate() {
            let layout = sample_layout(n as u64 * 10 + i as u64, n).unwrap();
            all.push(Sample::new(format!("g{n}-{i}"), layout, counts));
        }
    }
    let mut buf = Vec::new();
    write_dataset(&mut buf, &all).unwrap();
    std::fs::write(d.join("d.jsonl"), buf).unwrap();
    let report = json(&ok(&["analyze", "--dataset", "d.jsonl"], d));
    assert_eq!(report["kw_h"], 0.0);
    assert_eq!(report["kw_p"], 1.0);
    assert_eq!(report["group_sizes"], serde_json::json!([3, 3, 3]));
}

/// Train, validate on a copy of the train split, and evaluate on train.
#[test]
fn perfect_fit_evaluates_to_r2_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    short_sim(d, 100.0);
    ok(
        &["build-dataset", "--counts", "3:3,4:3,5:2", "--paths", "3", "--seed", "1", "--sim-config", "sim.toml", "--out", "base.jsonl"],
        d,
    );
    let mut data = Vec::new();
    for s in samples(d, "base.jsonl") {
        let mut v = s.clone();
        v.id.push('v');
        v.split = Split::Val;
        data.push(Sample {
            split: Split::Train,
            ..s
        });
        data.push(v);
    }
    let mut buf = Vec::new();
    write_dataset(&mut buf, &data).unwrap();
    std::fs::write(d.join("d.jsonl"), buf).unwrap();
    std::fs::write(
        d.join("model.toml"),
        "image_size = 64\npatch_size = 16\nembed_dim = 32\ndepth = 2\nheads = 4\nmlp_ratio = 2\n",
    )
    .unwrap();
    std::fs::write(
        d.join("train.toml"),
        "batch_size = 2\nmax_lr = 1e-3\nepochs = 200\npatience = 199\nweight_decay = 0.0\naugment_prob = 0.0\nseed = 3\n",
    )
    .unwrap();
    let summary = json(&ok(
        &["train", "--dataset", "d.jsonl", "--model-config", "model.toml", "--train-config", "train.toml", "--out", "m.bin", "--history", "h.csv"],
        d,
    ));
    assert!(summary["best_epoch"].as_u64().unwrap() >= 1);
    let history = String::from_utf8(read(d, "h.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,lr\n"));
    assert_eq!(history.lines().count(), 201);

    let m = json(&ok(&["eval", "--model", "m.bin", "--dataset", "d.jsonl", "--split", "train"], d));
    let r2 = m["r2"].as_f64().unwrap();
    assert!((r2 - 1.0).abs() < 1e-9, "r2 {r2}");

    // one heatmap cell per patch: 4x4 for a 64 px image
    std::fs::write(d.join("layout.json"), data[0].layout.to_json()).unwrap();
    ok(&["rollout", "--model", "m.bin", "--layout", "layout.json", "--out", "heat.pgm"], d);
    let pgm = read(d, "heat.pgm");
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(pgm.len(), "P5\n4 4\n255\n".len() + 16);

    let a = json(&ok(&["predict", "--model", "m.bin", "--layout", "layout.json"], d));
    let b = json(&ok(&["predict", "--model", "m.bin", "--layout", "layout.json"], d));
    assert_eq!(a, b);
    assert_eq!(a["model_version"].as_str().unwrap().len(), 64);
}
