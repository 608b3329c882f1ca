use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use lddmm_core::diagnostics::{diagnose as run_diagnostics, diagnose_outcome, read_correspondence, tre, DiagnosticsOptions};
use lddmm_core::flow::{apply_flow, flow_forward, refine_steps};
use lddmm_core::geometry::{load_pointcloud, save_pointcloud, Format, LoadOptions};
use lddmm_core::objective::chamfer;
use lddmm_core::solver::{geodesic_path, path_energy, prealigned_source, register_with_observer, RegistrationConfig};
use lddmm_core::{NetParams, PointCloud};

use crate::failure::{Failure, USAGE};
use crate::manifest::RunManifest;
use crate::{
    ActivationArg, DataTermArg, DiagnoseArgs, EvaluateArgs, FormatArg, GeodesicArgs, RegisterArgs, SweepArgs,
    SweepAxis, TrainArgs, WeightingArg,
};

const THETA_FILE: &str = "theta_star.json";

fn build_config(t: &TrainArgs) -> Result<RegistrationConfig, Failure> {
    let mut cfg = RegistrationConfig::default();
    if let Some(path) = &t.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        cfg.apply_kv_str(&text)?;
    }
    let mut set = |k: &str, v: String| cfg.set(k, &v);
    if let Some(v) = t.epochs {
        set("epochs", v.to_string())?;
    }
    if let Some(v) = t.num_blocks {
        set("L", v.to_string())?;
    }
    if let Some(v) = t.width {
        set("m", v.to_string())?;
    }
    if let Some(v) = t.eta {
        set("eta", format!("{v:?}"))?;
    }
    if let Some(v) = t.sigma {
        set("sigma", format!("{v:?}"))?;
    }
    if let Some(v) = t.data_term {
        set("data_term", if v == DataTermArg::Cd { "cd" } else { "med" }.into())?;
    }
    if let Some(v) = t.sinkhorn_eps {
        set("sinkhorn_epsilon", format!("{v:?}"))?;
    }
    if let Some(v) = t.activation {
        let name = match v {
            ActivationArg::Relu => "relu",
            ActivationArg::Leaky => "leaky",
            ActivationArg::Tanh => "tanh",
        };
        set("activation", name.into())?;
    }
    if let Some(v) = t.alpha {
        set("alpha", format!("{v:?}"))?;
    }
    if let Some(v) = t.seed {
        set("seed", v.to_string())?;
    }
    if t.no_normalize {
        set("normalize", "false".into())?;
    }
    if t.no_prealign {
        set("rigid_prealign", "false".into())?;
    }
    if let Some(v) = t.kinetic_weighting {
        set("kinetic_weighting", if v == WeightingArg::Riemann { "riemann" } else { "table1" }.into())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn format_of(path: &Path) -> Result<Format, Failure> {
    Format::from_path(path).ok_or_else(|| {
        Failure::usage(format!(
            "{}: unknown point-cloud extension (expected .obj, .ply or .xyz)",
            path.display()
        ))
    })
}

fn load(path: &Path) -> Result<PointCloud, Failure> {
    Ok(load_pointcloud(path, format_of(path)?, LoadOptions::default())?)
}

fn frame_format(choice: Option<FormatArg>, source: &Path) -> Format {
    match choice {
        Some(FormatArg::Obj) => Format::Obj,
        Some(FormatArg::Ply) => Format::Ply,
        Some(FormatArg::Xyz) => Format::Xyz,
        None => Format::from_path(source).unwrap_or(Format::Obj),
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

/// Runs `body`, then records its status in the manifest either way.
fn tracked(manifest: &mut RunManifest, dir: &Path, body: impl FnOnce(&mut RunManifest) -> Result<(), Failure>) -> Result<(), Failure> {
    manifest.write(dir)?;
    match body(manifest) {
        Ok(()) => manifest.finish(dir, "ok"),
        Err(f) => {
            let _ = manifest.finish(dir, &format!("failed: {}", f.message));
            Err(f)
        }
    }
}

fn write_frames(path: &[PointCloud], dir: &Path, format: Format) -> Result<(), Failure> {
    create_dir(dir)?;
    for (l, shape) in path.iter().enumerate() {
        save_pointcloud(shape, &dir.join(format!("frame_{l:03}.{}", format.extension())), format)?;
    }
    Ok(())
}

pub fn register(a: &RegisterArgs) -> Result<(), Failure> {
    let cfg = build_config(&a.train)?;
    let format = frame_format(a.frame_format, &a.source);
    let source = load(&a.source)?;
    let target = load(&a.target)?;
    let mut inputs = vec![("source".to_string(), a.source.clone()), ("target".to_string(), a.target.clone())];
    if let Some(c) = &a.correspondence {
        inputs.push(("correspondence".into(), c.clone()));
    }
    if let Some(c) = &a.train.config {
        inputs.push(("config".into(), c.clone()));
    }
    create_dir(&a.out)?;
    let mut manifest = RunManifest::start("register", inputs, cfg.to_kv_string(), &a.out, cfg.seed);
    tracked(&mut manifest, &a.out, |manifest| {
        write(&a.out.join("config.txt"), &cfg.to_kv_string())?;
        let correspondence = match &a.correspondence {
            Some(p) => Some(read_correspondence(p, source.len())?),
            None => None,
        };

        let mut loss_csv = String::from("epoch,data_term,kinetic,total,elapsed_s,grad_norm\n");
        let outcome = register_with_observer(&source, &target, &cfg, |e| {
            writeln!(
                loss_csv,
                "{},{:e},{:e},{:e},{:.6},{:e}",
                e.epoch,
                e.report.data_term,
                e.report.kinetic_total,
                e.report.total,
                e.elapsed.as_secs_f64(),
                e.gradient.norm()
            )
            .unwrap();
        })?;
        manifest.normalization = Some(outcome.normalization);
        manifest.prealign = Some(outcome.prealign);
        manifest.write(&a.out)?;

        write(&a.out.join("loss.csv"), &loss_csv)?;
        outcome.theta_star.save_json(&a.out.join(THETA_FILE))?;
        write_frames(&geodesic_path(&outcome), &a.out.join("frames"), format)?;
        write(&a.out.join("velocity.csv"), &outcome.final_flow.velocity_csv(&outcome.normalization))?;
        let deformed = outcome.deformed_source();
        save_pointcloud(&deformed, &a.out.join(format!("deformed.{}", format.extension())), format)?;

        let opts = DiagnosticsOptions {
            probe_grid: a.grid,
            jacobian_resolution: a.grid,
            seed: cfg.seed,
            ..Default::default()
        };
        let corr_target = correspondence.as_deref().map(|c| (&target, c));
        let (report, field) = diagnose_outcome(&outcome, corr_target, &opts)?;
        write(&a.out.join("diagnostics.txt"), &report.to_text())?;
        write(&a.out.join("jacobian.csv"), &field.to_csv())?;

        let best = outcome.best_report();
        let mut summary = String::new();
        writeln!(summary, "best_epoch: {}", outcome.best_epoch).unwrap();
        writeln!(summary, "epochs_run: {}", outcome.history.len()).unwrap();
        writeln!(summary, "best_total: {:e}", best.total).unwrap();
        writeln!(summary, "best_data_term: {:e}", best.data_term).unwrap();
        writeln!(summary, "best_kinetic: {:e}", best.kinetic_total).unwrap();
        writeln!(summary, "chamfer_initial: {:e}", chamfer(&source, &target)).unwrap();
        writeln!(summary, "chamfer_final: {:e}", chamfer(&deformed, &target)).unwrap();
        writeln!(summary, "path_length: {:e}", path_energy(&outcome)).unwrap();
        writeln!(summary, "eta_final: {:e}", outcome.eta_final).unwrap();
        writeln!(summary, "wall_time_s: {:.3}", outcome.wall_time.as_secs_f64()).unwrap();
        if let Some(t) = report.tre {
            writeln!(summary, "tre: {t:e}").unwrap();
        }
        writeln!(summary, "min_jacobian_det: {:e}", report.min_jacobian_det).unwrap();
        write(&a.out.join("summary.txt"), &summary)?;
        print!("{summary}");
        Ok(())
    })
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), Failure> {
    let deformed = load(&a.deformed)?;
    let target = load(&a.target)?;
    let corr = read_correspondence(&a.correspondence, deformed.len())?;
    let value = tre(&deformed, &target, &corr)?;
    println!("{value:?}");
    if let Some(path) = &a.append_csv {
        let fresh = !path.exists();
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Failure::io(path, e))?;
        let mut row = String::new();
        if fresh {
            row.push_str("label,tre\n");
        }
        writeln!(row, "{},{value:e}", a.label).unwrap();
        file.write_all(row.as_bytes()).map_err(|e| Failure::io(path, e))?;
    }
    Ok(())
}

/// Trained state of an earlier `register` run.
struct StoredRun {
    manifest: RunManifest,
    theta: NetParams,
    source: PointCloud,
    source_path: PathBuf,
    target: PointCloud,
}

impl StoredRun {
    fn load(dir: &Path) -> Result<Self, Failure> {
        let manifest = RunManifest::load(dir)?;
        if manifest.command != "register" || manifest.status != "ok" {
            return Err(Failure::usage(format!(
                "{} is not a completed register run (command {}, status {})",
                dir.display(),
                manifest.command,
                manifest.status
            )));
        }
        let theta = NetParams::load_json(&dir.join(THETA_FILE))?;
        let missing = |k: &str| Failure::usage(format!("manifest lacks the {k} input"));
        let source_path = manifest.input("source").ok_or_else(|| missing("source"))?.to_path_buf();
        let source = load(&source_path)?;
        let target = load(manifest.input("target").ok_or_else(|| missing("target"))?)?;
        Ok(StoredRun {
            manifest,
            theta,
            source,
            source_path,
            target,
        })
    }

    /// Source after normalization and rigid pre-alignment, as the flow saw it.
    fn flow_input(&self) -> PointCloud {
        let n = self.manifest.normalization.unwrap_or_default();
        let r = self.manifest.prealign.unwrap_or_default();
        r.apply_cloud(&n.forward_cloud(&self.source))
    }
}

pub fn geodesic(a: &GeodesicArgs) -> Result<(), Failure> {
    if a.refine == 0 {
        return Err(Failure::usage("--refine must be >= 1"));
    }
    let run = StoredRun::load(&a.run)?;
    create_dir(&a.out)?;
    let inputs = vec![("run".to_string(), a.run.clone())];
    let mut manifest = RunManifest::start("geodesic", inputs, run.manifest.config.clone(), &a.out, run.manifest.seed);
    tracked(&mut manifest, &a.out, |_| {
        let n = run.manifest.normalization.unwrap_or_default();
        let r = run.manifest.prealign.unwrap_or_default();
        let theta = refine_steps(&run.theta, a.refine)?;
        let flow = flow_forward(&run.flow_input(), &theta)?;
        let mut path = vec![prealigned_source(&run.source, &n, &r)];
        path.extend(flow.shapes[1..].iter().map(|s| n.inverse_cloud(s)));
        let format = frame_format(a.frame_format, &run.source_path);
        write_frames(&path, &a.out.join("frames"), format)?;
        write(&a.out.join("velocity.csv"), &flow.velocity_csv(&n))?;
        println!("frames: {}", path.len());
        Ok(())
    })
}

pub fn diagnose(a: &DiagnoseArgs) -> Result<(), Failure> {
    let run = StoredRun::load(&a.run)?;
    create_dir(&a.out)?;
    let mut inputs = vec![("run".to_string(), a.run.clone())];
    if let Some(c) = &a.correspondence {
        inputs.push(("correspondence".into(), c.clone()));
    }
    let mut manifest = RunManifest::start("diagnose", inputs, run.manifest.config.clone(), &a.out, run.manifest.seed);
    tracked(&mut manifest, &a.out, |_| {
        let n = run.manifest.normalization.unwrap_or_default();
        let opts = DiagnosticsOptions {
            probe_grid: a.grid,
            jacobian_resolution: a.grid,
            seed: run.manifest.seed,
            ..Default::default()
        };
        let src = run.flow_input();
        let tgt = n.forward_cloud(&run.target);
        let (mut report, field) = run_diagnostics(&run.theta, src.points(), tgt.points(), &opts)?;
        if let Some(path) = &a.correspondence {
            let corr = read_correspondence(path, run.source.len())?;
            let moved: Vec<_> = apply_flow(src.points(), &run.theta)?.iter().map(|p| n.inverse(p)).collect();
            report.tre = Some(lddmm_core::diagnostics::tre_points(&moved, run.target.points(), &corr)?);
        }
        write(&a.out.join("diagnostics.txt"), &report.to_text())?;
        write(&a.out.join("jacobian.csv"), &field.to_csv())?;
        print!("{}", report.to_text());
        Ok(())
    })
}

struct SweepRow {
    value: String,
    status: String,
    best_total: Option<f64>,
    best_epoch: Option<usize>,
    tre: Option<f64>,
    c_theta: Option<f64>,
    wall_s: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:e}"))
}

pub fn sweep(a: &SweepArgs) -> Result<(), Failure> {
    if a.values.is_empty() || a.values.iter().any(|v| v.trim().is_empty()) {
        return Err(Failure::usage("--values needs a non-empty comma-separated list"));
    }
    if a.jobs == 0 {
        return Err(Failure::usage("--jobs must be >= 1"));
    }
    let base = build_config(&a.train)?;
    let key = match a.axis {
        SweepAxis::M => "m",
        SweepAxis::Activation => "activation",
        SweepAxis::Sigma => "sigma",
    };
    let configs = a
        .values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.set(key, v.trim())?;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>, lddmm_core::Error>>()
        .map_err(|e| Failure {
            code: USAGE,
            message: e.to_string(),
        })?;
    let source = load(&a.source)?;
    let target = load(&a.target)?;
    let mut inputs = vec![("source".to_string(), a.source.clone()), ("target".to_string(), a.target.clone())];
    if let Some(c) = &a.correspondence {
        inputs.push(("correspondence".into(), c.clone()));
    }
    create_dir(&a.out)?;
    let mut manifest = RunManifest::start("sweep", inputs, base.to_kv_string(), &a.out, base.seed);
    tracked(&mut manifest, &a.out, |_| {
        write(&a.out.join("config.txt"), &base.to_kv_string())?;
        let correspondence = match &a.correspondence {
            Some(p) => Some(read_correspondence(p, source.len())?),
            None => None,
        };
        let run_one = |i: usize| -> SweepRow {
            let value = a.values[i].trim().to_string();
            match lddmm_core::solver::register(&source, &target, &configs[i]) {
                Ok(out) => {
                    let tre = correspondence
                        .as_deref()
                        .and_then(|c| tre(&out.deformed_source(), &target, c).ok());
                    SweepRow {
                        value,
                        status: "ok".into(),
                        best_total: Some(out.best_report().total),
                        best_epoch: Some(out.best_epoch),
                        tre,
                        c_theta: Some(out.theta_star.lipschitz_constant()),
                        wall_s: Some(out.wall_time.as_secs_f64()),
                    }
                }
                Err(e) => SweepRow {
                    value,
                    status: format!("failed: {}", e.to_string().replace(',', ";")),
                    best_total: None,
                    best_epoch: None,
                    tre: None,
                    c_theta: None,
                    wall_s: None,
                },
            }
        };
        let rows: Mutex<Vec<Option<SweepRow>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..a.jobs.min(configs.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= configs.len() {
                        break;
                    }
                    let row = run_one(i);
                    rows.lock().expect("no poisoned runs")[i] = Some(row);
                });
            }
        });
        let rows: Vec<SweepRow> = rows.into_inner().expect("no poisoned runs").into_iter().flatten().collect();
        let mut csv = format!("{key},status,best_total,best_epoch,tre,c_theta,wall_s\n");
        for r in &rows {
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                r.value,
                r.status,
                opt(r.best_total),
                r.best_epoch.map_or(String::new(), |e| e.to_string()),
                opt(r.tre),
                opt(r.c_theta),
                r.wall_s.map_or(String::new(), |w| format!("{w:.3}"))
            )
            .unwrap();
        }
        write(&a.out.join("sweep.csv"), &csv)?;
        print!("{csv}");
        if rows.iter().all(|r| r.status != "ok") {
            return Err(Failure {
                code: crate::failure::DIVERGENCE,
                message: "every sweep run failed".into(),
            });
        }
        Ok(())
    })
}
