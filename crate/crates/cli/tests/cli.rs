use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lddmm_core::geometry::{save_pointcloud, Format};
use lddmm_core::synthetic::{fibonacci_sphere, sphere_to_ellipsoid};
use lddmm_core::PointCloud;
use nalgebra::Vector3;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_resnet-lddmm"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// sphere.obj, ellipsoid.obj (60 points) and an identity correspondence.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = sphere_to_ellipsoid(60);
    save_pointcloud(&s, &dir.path().join("sphere.obj"), Format::Obj).unwrap();
    save_pointcloud(&t, &dir.path().join("ellipsoid.obj"), Format::Obj).unwrap();
    let corr: String = (0..60).map(|i| format!("{i} {i}\n")).collect();
    fs::write(dir.path().join("corr.txt"), corr).unwrap();
    dir
}

const SMALL: [&str; 8] = ["--epochs", "60", "--width", "16", "--L", "4", "--eta", "1e-3"];

fn files_under(root: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p);
            }
        }
    }
    out
}

fn summary_value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("{key} missing in {text}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn identity_pair_registers() {
    let ws = workspace();
    let o = run(ws.path(), &["register", "--source", "sphere.obj", "--target", "sphere.obj", "--out", "run", "--epochs", "10", "--width", "32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let loss = fs::read_to_string(ws.path().join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 11);
    let first_total: f64 = loss.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!(summary_value(&stdout(&o), "best_total") <= first_total);
    assert_eq!(summary_value(&stdout(&o), "chamfer_initial"), 0.0);
}

#[test]
fn missing_target_is_usage_error() {
    let ws = workspace();
    let o = run(ws.path(), &["register", "--source", "sphere.obj", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    assert!(!ws.path().join("run").exists());
}

#[test]
fn bad_flag_values_are_usage_errors() {
    let ws = workspace();
    let o = run(ws.path(), &["register", "--source", "sphere.obj", "--target", "ellipsoid.obj", "--out", "run", "--sigma", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(ws.path(), &["register", "--source", "sphere.obj", "--target", "ellipsoid.obj", "--out", "run", "--activation", "swish"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unreadable_input_is_io_error() {
    let ws = workspace();
    let o = run(ws.path(), &["register", "--source", "absent.obj", "--target", "ellipsoid.obj", "--out", "run"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn divergence_exit_code() {
    let ws = workspace();
    let o = run(ws.path(), &["register", "--source", "sphere.obj", "--target", "ellipsoid.obj", "--out", "run", "--epochs", "10", "--width", "16", "--eta", "1e120"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let manifest = fs::read_to_string(ws.path().join("run/manifest.json")).unwrap();
    assert!(manifest.contains("failed: optimization diverged"));
}

#[test]
fn register_outputs_and_followups() {
    let ws = workspace();
    let before = files_under(ws.path());
    let mut args = vec!["register", "--source", "sphere.obj", "--target", "ellipsoid.obj", "--out", "run", "--correspondence", "corr.txt"];
    args.extend(SMALL);
    let o = run(ws.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(summary_value(&text, "min_jacobian_det") > 0.0);
    assert!(summary_value(&text, "chamfer_final") < summary_value(&text, "chamfer_initial"));
    assert!(summary_value(&text, "tre") > 0.0);

    let after = files_under(ws.path());
    let run_dir = ws.path().join("run");
    for new in after.difference(&before) {
        assert!(new.starts_with(&run_dir), "wrote outside --out: {}", new.display());
    }
    for f in ["manifest.json", "config.txt", "theta_star.json", "loss.csv", "velocity.csv", "deformed.obj", "diagnostics.txt", "jacobian.csv", "summary.txt"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let frames: Vec<_> = fs::read_dir(run_dir.join("frames")).unwrap().collect();
    assert_eq!(frames.len(), 5);
    let frame0 = fs::read_to_string(run_dir.join("frames/frame_000.obj")).unwrap();

    // Geodesic re-export from the stored run matches the original frames.
    let o = run(ws.path(), &["geodesic", "--run", "run", "--out", "geo"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for l in 0..5 {
        let name = format!("frames/frame_{l:03}.obj");
        assert_eq!(
            fs::read_to_string(ws.path().join("geo").join(&name)).unwrap(),
            fs::read_to_string(run_dir.join(&name)).unwrap(),
            "{name}"
        );
    }
    assert!(frame0.starts_with("v "));
    let o = run(ws.path(), &["geodesic", "--run", "run", "--out", "geo2", "--refine", "2"]);
    assert!(o.status.success());
    assert_eq!(fs::read_dir(ws.path().join("geo2/frames")).unwrap().count(), 9);

    let o = run(ws.path(), &["diagnose", "--run", "run", "--out", "diag", "--correspondence", "corr.txt", "--grid", "6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(ws.path().join("diag/diagnostics.txt")).unwrap();
    assert!(summary_value(&report, "min_jacobian_det") > 0.0);
    assert!((summary_value(&report, "tre") - summary_value(&text, "tre")).abs() < 1e-12);

    // Evaluate the exported endpoint against the target.
    let o = run(ws.path(), &["evaluate", "--deformed", "run/deformed.obj", "--target", "ellipsoid.obj", "--correspondence", "corr.txt"]);
    assert!(o.status.success());
    let tre: f64 = stdout(&o).trim().parse().unwrap();
    assert!((tre - summary_value(&text, "tre")).abs() < 1e-9);
}

#[test]
fn manifest_reproduces_run_exactly() {
    let ws = workspace();
    let mut args = vec!["register", "--source", "sphere.obj", "--target", "ellipsoid.obj", "--out", "a", "--seed", "7"];
    args.extend(SMALL);
    assert!(run(ws.path(), &args).status.success());

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path().join("a/manifest.json")).unwrap()).unwrap();
    fs::write(ws.path().join("replay.txt"), manifest["config"].as_str().unwrap()).unwrap();
    let input = |k: &str| {
        manifest["inputs"]
            .as_array()
            .unwrap()
            .iter()
            .find(|p| p[0] == k)
            .unwrap()[1]
            .as_str()
            .unwrap()
            .to_string()
    };
    let (src, tgt) = (input("source"), input("target"));
    let o = run(ws.path(), &["register", "--source", &src, "--target", &tgt, "--out", "b", "--config", "replay.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["theta_star.json", "deformed.obj", "config.txt", "frames/frame_004.obj"] {
        assert_eq!(
            fs::read(ws.path().join("a").join(f)).unwrap(),
            fs::read(ws.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
    let strip = |p: &str| -> Vec<String> {
        fs::read_to_string(ws.path().join(p))
            .unwrap()
            .lines()
            .map(|l| l.rsplitn(3, ',').nth(2).unwrap().to_string())
            .collect()
    };
    assert_eq!(strip("a/loss.csv"), strip("b/loss.csv"));
}

#[test]
fn evaluate_examples() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let one = PointCloud::new(vec![Vector3::zeros()]).unwrap();
    let off = PointCloud::new(vec![Vector3::new(3.0, 4.0, 0.0)]).unwrap();
    save_pointcloud(&one, &p.join("a.xyz"), Format::Xyz).unwrap();
    save_pointcloud(&off, &p.join("b.xyz"), Format::Xyz).unwrap();
    fs::write(p.join("c.txt"), "0 0\n").unwrap();
    fs::write(p.join("bad.txt"), "0\n").unwrap();
    let s = fibonacci_sphere(20, 1.0);
    save_pointcloud(&s, &p.join("s.ply"), Format::Ply).unwrap();
    let ident: String = (0..20).map(|i| format!("{i} {i}\n")).collect();
    fs::write(p.join("ident.txt"), ident).unwrap();

    let o = run(p, &["evaluate", "--deformed", "s.ply", "--target", "s.ply", "--correspondence", "ident.txt"]);
    assert_eq!(stdout(&o).trim(), "0.0");
    let o = run(p, &["evaluate", "--deformed", "a.xyz", "--target", "b.xyz", "--correspondence", "c.txt", "--append-csv", "tre.csv", "--label", "pair"]);
    assert_eq!(stdout(&o).trim(), "5.0");
    assert_eq!(fs::read_to_string(p.join("tre.csv")).unwrap(), "label,tre\npair,5e0\n");
    let o = run(p, &["evaluate", "--deformed", "a.xyz", "--target", "b.xyz", "--correspondence", "bad.txt"]);
    assert_eq!(o.status.code(), Some(5));
    let o = run(p, &["evaluate", "--deformed", "a.xyz", "--target", "b.xyz", "--correspondence", "none.txt"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn sweep_rows_and_errors() {
    let ws = workspace();
    let o = run(ws.path(), &["sweep", "--source", "sphere.obj", "--target", "ellipsoid.obj", "--out", "sw", "--axis", "m", "--values", "4,8,16", "--epochs", "20", "--L", "3", "--correspondence", "corr.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(ws.path().join("sw/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "m,status,best_total,best_epoch,tre,c_theta,wall_s");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.split(',').nth(1) == Some("ok")));

    let o = run(ws.path(), &["sweep", "--source", "sphere.obj", "--target", "ellipsoid.obj", "--out", "sw2", "--axis", "activation", "--values", "relu,leaky,tanh", "--epochs", "10", "--L", "2", "--width", "8", "--jobs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(ws.path().join("sw2/sweep.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["relu", "leaky", "tanh"]);

    let o = run(ws.path(), &["sweep", "--source", "sphere.obj", "--target", "ellipsoid.obj", "--out", "sw3", "--axis", "sigma", "--values"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(ws.path(), &["sweep", "--source", "sphere.obj", "--target", "ellipsoid.obj", "--out", "sw4", "--axis", "sigma", "--values", "0.1,-1"]);
    assert_eq!(o.status.code(), Some(2));
}
