use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flexicubes::mesh::TriMesh;
use flexicubes::target::normalize_mesh;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexicubes"))
        .args(args)
        .env_remove("FLEXI_SEED")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_writes_mesh_metrics_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "fit", "--target", "builtin:sphere", "--res", "16", "--iters", "100",
        "--metric-samples", "20000", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["mesh.obj", "metrics.json", "loss.csv", "checkpoint.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let m = json(&out.join("metrics.json"));
    assert!(m["cd"].as_f64().unwrap() < 5e-3);
    let rows = fs::read_to_string(out.join("loss.csv")).unwrap().lines().count();
    assert_eq!(rows, 101);
}

#[test]
fn fit_is_byte_identical_under_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut meshes = Vec::new();
    for run_id in ["a", "b"] {
        let out = dir.path().join(run_id);
        let o = run(&[
            "fit", "--target", "builtin:torus", "--res", "12", "--iters", "30", "--seed", "7",
            "--metric-samples", "5000", "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
        meshes.push((
            fs::read(out.join("mesh.obj")).unwrap(),
            fs::read(out.join("loss.csv")).unwrap(),
            fs::read(out.join("metrics.json")).unwrap(),
        ));
    }
    assert!(meshes[0] == meshes[1]);
}

#[test]
fn seed_comes_from_the_environment_when_not_given() {
    let dir = tempfile::tempdir().unwrap();
    let go = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join(name);
        let mut c = Command::new(env!("CARGO_BIN_EXE_flexicubes"));
        c.args(["fit", "--target", "builtin:sphere", "--res", "8", "--iters", "5", "--metric-samples", "1000"]);
        c.args(["--out", out.to_str().unwrap()]);
        c.env_remove("FLEXI_SEED");
        if let Some(e) = env {
            c.env("FLEXI_SEED", e);
        }
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        assert!(c.output().unwrap().status.success());
        fs::read(out.join("loss.csv")).unwrap()
    };
    let env3 = go("env3", Some("3"), None);
    let flag3 = go("flag3", None, Some("3"));
    let default = go("default", None, None);
    let both = go("both", Some("9"), Some("3"));
    assert_eq!(env3, flag3);
    assert_eq!(both, flag3);
    assert_ne!(default, flag3);
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("grad.json");
    let o = run(&["gradcheck", "--res", "5", "--trials", "100", "--report-json", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&report);
    assert!(r["passed"].as_bool().unwrap());
    assert!(r["max_rel_err"].as_f64().unwrap() < 1e-4);
}

#[test]
fn gradcheck_breach_exits_nonzero() {
    let o = run(&["gradcheck", "--res", "4", "--trials", "2", "--tolerance", "1e-300"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unreadable_target_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["fit", "--target", "/nonexistent/shape.obj", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn unwritable_output_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    let o = run(&["extract", "--target", "builtin:sphere", "--res", "8", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn octree_and_tet_are_exclusive() {
    let o = run(&["fit", "--target", "builtin:sphere", "--octree", "2", "--tet"]);
    assert!(!o.status.success());
}

#[test]
fn metrics_of_a_mesh_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ex");
    let o = run(&["extract", "--target", "builtin:sphere", "--res", "16", "--metric-samples", "1000", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let mesh = normalize_mesh(&TriMesh::read_obj(out.join("mesh.obj")).unwrap());
    let path = dir.path().join("norm.obj");
    mesh.write_obj(&path).unwrap();
    let report = dir.path().join("m.json");
    let p = path.to_str().unwrap();
    let o = run(&["metrics", "--target", p, "--mesh", p, "--report-json", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&report);
    assert!(m["f1"].as_f64().unwrap() > 0.999);
    assert!(m["cd"].as_f64().unwrap() < 1e-3);
}

#[test]
fn tet_writes_a_conforming_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tet");
    let o = run(&["tet", "--target", "builtin:sphere", "--res", "16", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(out.join("mesh.tet").exists());
    let r = json(&out.join("tet.json"));
    assert_eq!(r["conformity"]["defects"].as_u64(), Some(0));
    assert_eq!(r["conformity"]["missing"].as_u64(), Some(0));
}

#[test]
fn bench_favours_flexible_extraction_on_a_rotated_box() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = run(&[
        "bench", "--target", "builtin:box", "--rotate", "22.5,22.5,0", "--res", "32", "--iters", "300",
        "--metric-samples", "50000", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let b = json(&out.join("bench.json"));
    assert!(b["flexicubes"]["cd"].as_f64().unwrap() < b["mc"]["cd"].as_f64().unwrap());
}

#[test]
fn bad_rotation_is_a_usage_error() {
    let o = run(&["extract", "--target", "builtin:box", "--rotate", "1,2"]);
    assert!(!o.status.success());
}
