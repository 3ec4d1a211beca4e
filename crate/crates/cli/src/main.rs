//! `flexicubes` command-line tool: fitting, one-shot extraction,
//! benchmarking against marching cubes, gradient checks, tetrahedral export
//! and mesh metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use flexicubes::diff::{grid_grad_check, GradCheckConfig};
use flexicubes::extract::{extract_quads, split_final, FlexParams};
use flexicubes::grid::ScalarGrid;
use flexicubes::mesh::TriMesh;
use flexicubes::metrics::{metrics, MetricConfig, MetricReport};
use flexicubes::objectives::LossWeights;
use flexicubes::optimize::{Field, FitConfig, FitState, Mode, OctreePolicy, Phase2};
use flexicubes::tables::DmcTables;
use flexicubes::target::{Sdf, TargetShape};
use flexicubes::tet::{conformity, extract_tets, filter_thin_tets, DEFAULT_THIN_TET_VOLUME};
use flexicubes::Error;

#[derive(Parser, Debug)]
#[command(name = "flexicubes", version, about = "Differentiable isosurface extraction and mesh fitting")]
struct Cli {
    /// Worker threads for metric evaluation (0 uses all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a grid to a target and write the final mesh, metrics, loss log and checkpoint.
    Fit(FitArgs),
    /// Extract a mesh from the target's sampled signed distance without fitting.
    Extract(ExtractArgs),
    /// Fit with flexible extraction and with the marching cubes baseline on the same budget.
    Bench(FitArgs),
    /// Compare analytic gradients with central finite differences on random grids.
    Gradcheck(GradArgs),
    /// Tetrahedralize the interior of the target's sampled signed distance.
    Tet(ExtractArgs),
    /// Evaluate a mesh against a target.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug, Clone)]
struct TargetArgs {
    /// `builtin:<name>` or a path to an OBJ file.
    #[arg(long)]
    target: String,
    /// Rotation in degrees about x, y and z, applied in that order.
    #[arg(long, value_parser = parse_triple, default_value = "0,0,0")]
    rotate: [f64; 3],
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Cells per axis over [-1, 1]^3 (level-0 cells with --octree).
    #[arg(long, default_value_t = 32)]
    res: usize,
    #[arg(long, env = "FLEXI_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write the metric report to this path.
    #[arg(long)]
    report_json: Option<PathBuf>,
    /// Points sampled per surface for metrics.
    #[arg(long, default_value_t = 100_000)]
    metric_samples: usize,
}

#[derive(Args, Debug, Clone)]
struct FitArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    w_surface: f64,
    #[arg(long, default_value_t = 10.0)]
    w_depth: f64,
    #[arg(long, default_value_t = 2000.0)]
    w_sdf: f64,
    #[arg(long, default_value_t = 1.0)]
    w_dev: f64,
    #[arg(long, default_value_t = 0.2)]
    w_sign_start: f64,
    #[arg(long, default_value_t = 0.01)]
    w_sign_end: f64,
    #[arg(long, default_value_t = 0.0)]
    w_developable: f64,
    /// Extra steps with the edge regularizer ramped from 0 to --edge-max.
    #[arg(long, default_value_t = 0)]
    phase2_steps: usize,
    #[arg(long, default_value_t = 100.0)]
    edge_max: f64,
    /// Samples drawn per iteration for each point loss.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Fit the marching cubes baseline instead (sdf and deformation only).
    #[arg(long)]
    mc: bool,
    /// Write a tetrahedral mesh of the fitted interior.
    #[arg(long, conflicts_with = "octree")]
    tet: bool,
    /// Fit on an octree with this maximum depth.
    #[arg(long)]
    octree: Option<u8>,
    /// Running per-leaf loss at which octree leaves are split.
    #[arg(long, default_value_t = 0.04)]
    refine_threshold: f64,
    /// Accepted for symmetry with `extract`; fitted meshes always use the final split.
    #[arg(long)]
    final_split: bool,
}

#[derive(Args, Debug, Clone)]
struct ExtractArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[command(flatten)]
    common: CommonArgs,
    /// Write triangles from the final diagonal split instead of quads.
    #[arg(long)]
    final_split: bool,
    /// Use the marching cubes baseline.
    #[arg(long)]
    mc: bool,
    /// Drop tetrahedra below this volume.
    #[arg(long, default_value_t = DEFAULT_THIN_TET_VOLUME)]
    thin_volume: f64,
}

#[derive(Args, Debug, Clone)]
struct GradArgs {
    #[arg(long, default_value_t = 5)]
    res: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, env = "FLEXI_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Parameters checked per group and grid.
    #[arg(long, default_value_t = 20)]
    per_group: usize,
    #[arg(long)]
    report_json: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct MetricsArgs {
    /// Mesh to evaluate.
    #[arg(long)]
    mesh: PathBuf,
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long, env = "FLEXI_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100_000)]
    metric_samples: usize,
    #[arg(long)]
    report_json: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    NonFinite(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 2,
            CliError::NonFinite(_) => 3,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) => CliError::Io(e.to_string()),
            Error::NonFinite(_) => CliError::NonFinite(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|v| format!("expected three comma separated angles, got {}", v.len()))
}

fn load_target(t: &TargetArgs) -> CliResult<TargetShape> {
    let base = match t.target.strip_prefix("builtin:") {
        Some(name) => {
            let sdf = Sdf::builtin(name).map_err(|_| {
                CliError::Failed(format!("unknown builtin {name:?}; available: {}", Sdf::BUILTINS.join(", ")))
            })?;
            TargetShape::analytic(sdf)?
        }
        None => {
            let path = Path::new(&t.target);
            TargetShape::load_obj(path).map_err(|e| match e {
                Error::Io(err) => io_err(path, err),
                other => CliError::Io(format!("{}: {other}", path.display())),
            })?
        }
    };
    let rot = t.rotate;
    if rot == [0.0; 3] && t.scale == 1.0 {
        return Ok(base);
    }
    Ok(base.transformed(rot, t.scale)?)
}

fn out_dir(c: &CommonArgs) -> CliResult<&Path> {
    fs::create_dir_all(&c.out).map_err(|e| io_err(&c.out, e))?;
    Ok(&c.out)
}

fn metric_config(samples: usize, seed: u64) -> MetricConfig {
    MetricConfig { samples, seed, ..Default::default() }
}

fn fit_config(a: &FitArgs, mode: Mode) -> FitConfig {
    let weights = LossWeights {
        surface: a.w_surface,
        depth: a.w_depth,
        sdf: a.w_sdf,
        dev: a.w_dev,
        sign_start: a.w_sign_start,
        sign_end: a.w_sign_end,
        edge: 0.0,
        developable: a.w_developable,
    };
    FitConfig {
        iterations: a.iters,
        lr: a.lr,
        weights,
        seed: a.common.seed,
        resolution: a.common.res,
        surface_samples: a.samples,
        sdf_samples: a.samples,
        mesh_samples: a.samples,
        mode,
        phase2: (a.phase2_steps > 0).then_some(Phase2 { steps: a.phase2_steps, edge_max: a.edge_max }),
        octree: a.octree.map(|d| OctreePolicy::evenly(d, a.refine_threshold, a.iters)),
        ..Default::default()
    }
}

struct FitRun {
    state: FitState,
    mesh: TriMesh,
    report: MetricReport,
}

/// Runs one fit and writes its artifacts under `dir` with file names
/// prefixed by `tag`.
fn run_fit(a: &FitArgs, mode: Mode, target: &TargetShape, tables: &DmcTables, dir: &Path, tag: &str) -> CliResult<FitRun> {
    let cfg = fit_config(a, mode);
    let mut state = FitState::new(&cfg)?;
    let outcome = state.run(&cfg, target, tables);
    write(&dir.join(format!("{tag}loss.csv")), &state.history_csv())?;
    let ckpt = dir.join(format!("{tag}checkpoint.json"));
    state.save(&ckpt).map_err(|e| io_err(&ckpt, e))?;
    if let Err(e) = outcome {
        log::error!("fit aborted at iteration {}; last good state saved to {}", state.iter, ckpt.display());
        return Err(e.into());
    }
    let (mesh, stats) = state.final_mesh(&cfg, tables)?;
    if mesh.is_empty() {
        return Err(CliError::Failed("final extraction is empty".into()));
    }
    write(&dir.join(format!("{tag}mesh.obj")), &mesh.to_obj())?;
    if let Some(s) = stats {
        write(&dir.join(format!("{tag}octree.json")), &serde_json::to_string_pretty(&s).map_err(Error::from)?)?;
    }
    if a.tet {
        if let Field::Grid(g) = &state.field {
            let q = extract_quads(g, &state.params, tables)?;
            let tets = filter_thin_tets(&extract_tets(g, &state.params, tables, &q)?, DEFAULT_THIN_TET_VOLUME);
            let p = dir.join(format!("{tag}mesh.tet"));
            tets.write_tet(&p).map_err(|e| io_err(&p, e))?;
        }
    }
    let report = metrics(&mesh, target, &metric_config(a.common.metric_samples, a.common.seed))?;
    Ok(FitRun { state, mesh, report })
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let target = load_target(&a.target)?;
    let tables = DmcTables::build()?;
    let dir = out_dir(&a.common)?;
    let mode = if a.mc { Mode::Mc } else { Mode::Flexi };
    let run = run_fit(a, mode, &target, &tables, dir, "")?;
    let json = run.report.to_json()?;
    write(&dir.join("metrics.json"), &json)?;
    if let Some(p) = &a.common.report_json {
        write(p, &json)?;
    }
    println!(
        "fit: {} iterations, {} triangles, cd {:.6e}, f1 {:.4}",
        run.state.iter, run.report.triangles, run.report.cd, run.report.f1
    );
    Ok(())
}

fn cmd_bench(a: &FitArgs) -> CliResult<()> {
    if a.octree.is_some() {
        return Err(CliError::Failed("bench runs on uniform grids only".into()));
    }
    let target = load_target(&a.target)?;
    let tables = DmcTables::build()?;
    let dir = out_dir(&a.common)?;
    let flexi = run_fit(a, Mode::Flexi, &target, &tables, dir, "flexicubes_")?;
    let mc = run_fit(a, Mode::Mc, &target, &tables, dir, "mc_")?;
    let json = serde_json::to_string_pretty(&json!({
        "flexicubes": flexi.report,
        "mc": mc.report,
        "iterations": a.iters,
        "resolution": a.common.res,
    }))
    .map_err(Error::from)?;
    write(&dir.join("bench.json"), &json)?;
    if let Some(p) = &a.common.report_json {
        write(p, &json)?;
    }
    println!(
        "bench: flexicubes cd {:.6e} ({} tris), mc cd {:.6e} ({} tris)",
        flexi.report.cd,
        flexi.mesh.triangles.len(),
        mc.report.cd,
        mc.mesh.triangles.len()
    );
    Ok(())
}

fn sampled_grid(target: &TargetShape, res: usize) -> CliResult<ScalarGrid> {
    if res == 0 {
        return Err(CliError::Failed("resolution must be positive".into()));
    }
    Ok(ScalarGrid::from_fn([res; 3], [-1.0; 3], 2.0 / res as f64, |p| target.sdf(p))?)
}

fn cmd_extract(a: &ExtractArgs) -> CliResult<()> {
    let target = load_target(&a.target)?;
    let tables = DmcTables::build()?;
    let dir = out_dir(&a.common)?;
    let grid = sampled_grid(&target, a.common.res)?;
    let params = FlexParams::new(grid.num_cells());
    let (text, tri) = if a.mc {
        let m = flexicubes::extract::extract_mc_baseline(&grid, &tables)?;
        (m.to_obj(), m)
    } else {
        let q = extract_quads(&grid, &params, &tables)?;
        let tri = split_final(&q, &params);
        (if a.final_split { tri.to_obj() } else { q.to_obj() }, tri)
    };
    write(&dir.join("mesh.obj"), &text)?;
    if tri.is_empty() {
        println!("extract: empty surface");
        return Ok(());
    }
    let report = metrics(&tri, &target, &metric_config(a.common.metric_samples, a.common.seed))?;
    let json = report.to_json()?;
    write(&dir.join("metrics.json"), &json)?;
    if let Some(p) = &a.common.report_json {
        write(p, &json)?;
    }
    println!("extract: {} triangles, cd {:.6e}", report.triangles, report.cd);
    Ok(())
}

fn cmd_tet(a: &ExtractArgs) -> CliResult<()> {
    let target = load_target(&a.target)?;
    let tables = DmcTables::build()?;
    let dir = out_dir(&a.common)?;
    let grid = sampled_grid(&target, a.common.res)?;
    let params = FlexParams::new(grid.num_cells());
    let q = extract_quads(&grid, &params, &tables)?;
    let tets = extract_tets(&grid, &params, &tables, &q)?;
    let kept = filter_thin_tets(&tets, a.thin_volume);
    let p = dir.join("mesh.tet");
    kept.write_tet(&p).map_err(|e| io_err(&p, e))?;
    let surface = split_final(&q, &params);
    write(&dir.join("surface.obj"), &surface.to_obj())?;
    let report = conformity(&tets, &grid, &surface.triangles);
    let json = serde_json::to_string_pretty(&json!({
        "tets": tets.tets.len(),
        "kept": kept.tets.len(),
        "volume": kept.total_volume(),
        "conformity": report,
    }))
    .map_err(Error::from)?;
    write(&dir.join("tet.json"), &json)?;
    if let Some(p) = &a.common.report_json {
        write(p, &json)?;
    }
    println!("tet: {} tetrahedra ({} after filtering), volume {:.6}", tets.tets.len(), kept.tets.len(), kept.total_volume());
    Ok(())
}

fn cmd_gradcheck(a: &GradArgs) -> CliResult<()> {
    let cfg = GradCheckConfig { step: a.step, per_group: a.per_group, tolerance: a.tolerance };
    let report = grid_grad_check(a.res, a.trials, &LossWeights::default(), &cfg, a.seed)?;
    let json = report.to_json()?;
    if let Some(p) = &a.report_json {
        write(p, &json)?;
    }
    println!("{json}");
    if !report.passed {
        return Err(CliError::Failed(format!(
            "max relative error {:.3e} exceeds tolerance {:.1e}",
            report.max_rel_err, report.tolerance
        )));
    }
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> CliResult<()> {
    let target = load_target(&a.target)?;
    let mesh = TriMesh::read_obj(&a.mesh).map_err(|e| io_err(&a.mesh, e))?;
    let report = metrics(&mesh, &target, &metric_config(a.metric_samples, a.seed))?;
    let json = report.to_json()?;
    if let Some(p) = &a.report_json {
        write(p, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Tet(a) => cmd_tet(a),
        Command::Metrics(a) => cmd_metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
