use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use dne_core::mesh::{mpvpe, HandMesh};
use dne_core::pipeline::load_instance;

fn dne(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dne"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dne(args);
    assert!(
        out.status.success(),
        "dne {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
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
fn gen_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen", "--out", s(&a), "--count", "3", "--seed", "7"]);
    ok(&["gen", "--out", s(&b), "--count", "3", "--seed", "7"]);
    assert_eq!(files(&a), files(&b));
    let names: Vec<String> = files(&a).iter().map(|(p, _)| p.display().to_string()).collect();
    for f in ["gt_mesh.json", "coarse_mesh.json", "camera.json", "features.dnepack"] {
        assert!(names.contains(&format!("000002/{f}")), "{names:?}");
    }
    assert!(names.contains(&"manifest.json".to_string()));
}

#[test]
fn zero_corruption_copies_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen", "--out", s(tmp.path()), "--count", "2", "--seed", "1", "--corruption", "0"]);
    let inst = load_instance(tmp.path().join("000001")).unwrap();
    assert_eq!(inst.coarse_mesh, inst.gt_mesh);
    assert_eq!(inst.coarse_camera, inst.gt_camera);
}

#[test]
fn manifest_reports_coarse_error_in_band() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen", "--out", s(tmp.path()), "--count", "100", "--seed", "3"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    let mean = m["mean_coarse_mpvpe"].as_f64().unwrap();
    assert!((0.04..=0.08).contains(&mean), "{mean}");
    assert_eq!(m["instances"].as_array().unwrap().len(), 100);
}

#[test]
fn train_refine_eval_round() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("run/model.dnepack");
    ok(&["gen", "--out", s(&data), "--count", "12", "--seed", "2"]);
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--modules", "2", "--samples", "2", "--epochs", "1", "--seed", "4"]);
    let csv = fs::read_to_string(tmp.path().join("run/metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,split,loss,mpvpe3d,mpjpe3d,mpvpe2d\n"));
    assert_eq!(csv.lines().count(), 4);

    let out = tmp.path().join("refined");
    ok(&["refine", "--ckpt", s(&ckpt), "--instance", s(&data.join("000005")), "--out", s(&out)]);
    let trace: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(out.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace.len(), 2);

    // eval agrees with refine followed by the metric by hand
    let table = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)]);
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    let eval_csv = fs::read_to_string(tmp.path().join("run/eval.csv")).unwrap();
    assert_eq!(eval_csv.lines().next().unwrap().split(',').collect::<Vec<_>>(), header);

    let mut total = 0.0;
    for i in 0..12 {
        let dir = data.join(format!("{i:06}"));
        let r = tmp.path().join(format!("r{i}"));
        ok(&["refine", "--ckpt", s(&ckpt), "--instance", s(&dir), "--out", s(&r)]);
        let refined = HandMesh::load(r.join("refined_mesh.json")).unwrap();
        total += mpvpe(&refined, &load_instance(&dir).unwrap().gt_mesh).unwrap();
    }
    let row = eval_csv.lines().find(|l| l.starts_with("refined,all,")).unwrap();
    let reported: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
    assert!((reported - total / 12.0).abs() < 1e-8, "{reported} vs {}", total / 12.0);
}

#[test]
fn initial_checkpoint_refines_to_the_input() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("init.dnepack");
    ok(&["gen", "--out", s(&data), "--count", "6", "--seed", "5", "--corruption", "0"]);
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "0"]);
    let out = tmp.path().join("r");
    ok(&["refine", "--ckpt", s(&ckpt), "--instance", s(&data.join("000000")), "--out", s(&out)]);
    let inst = load_instance(data.join("000000")).unwrap();
    let refined = HandMesh::load(out.join("refined_mesh.json")).unwrap();
    assert_eq!(refined, inst.coarse_mesh);

    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--csv", s(&tmp.path().join("e.csv"))]);
    for line in fs::read_to_string(tmp.path().join("e.csv")).unwrap().lines().skip(1) {
        let cols: Vec<f64> = line.split(',').skip(3).map(|x| x.parse().unwrap()).collect();
        assert_eq!(cols[0], 0.0);
        assert_eq!(cols[1], 0.0);
        // only the ridge term moves the camera
        assert!(cols[2] < 1e-3, "{line}");
    }
}

#[test]
fn verify_suites_and_negative_control() {
    ok(&["verify", "--suite", "all"]);
    let t = Instant::now();
    ok(&["verify", "--suite", "ridge"]);
    assert!(t.elapsed().as_secs_f64() < 5.0);
    let bad = dne(&["verify", "--suite", "gradcheck", "--corrupt-gradient"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn io_and_config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    assert_eq!(dne(&["gen", "--out", s(&blocker.join("sub")), "--count", "1"]).status.code(), Some(2));
    assert_eq!(dne(&["eval", "--ckpt", "/nonexistent", "--data", s(tmp.path())]).status.code(), Some(2));

    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, br#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(dne(&["--config", s(&cfg), "gen", "--out", s(tmp.path()), "--count", "1"]).status.code(), Some(2));
    assert_eq!(dne(&["gen", "--out", s(tmp.path()), "--count", "1", "--corruption", "-1"]).status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_dne"))
        .args(["verify", "--suite", "pooling"])
        .env("DNE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
