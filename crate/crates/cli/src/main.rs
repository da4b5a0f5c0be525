//! `rnmpc`: offline region construction and online simulation for regional
//! nonlinear MPC.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde_json::{json, Value};

use regional_nmpc::atlas::{
    explore_grid, group_by_subset, saturated_subset, ActiveSetTolerances, FeedbackClass, GridSpec,
    SampleAtlas, Window,
};
use regional_nmpc::controller::{coverage_estimate, run_closed_loop, CoverageEstimate};
use regional_nmpc::ellipsoid::{fit_classes, FitParams};
use regional_nmpc::model::{load_model, SystemModel};
use regional_nmpc::ocp::OcpInstance;
use regional_nmpc::sqp::{check_region_regularity, classify_active_sets, SolveStatus, SolverConfig, SqpSolver};
use regional_nmpc::store::RegionStore;
use regional_nmpc::Error;

mod exit {
    pub const RUNTIME: u8 = 1;
    pub const BAD_INPUT: u8 = 2;
    pub const INFEASIBLE: u8 = 3;
    pub const SOLVER_FAILURE: u8 = 4;
    pub const STORE_REJECTED: u8 = 5;
    pub const NO_FEASIBLE_SAMPLES: u8 = 6;
}

#[derive(Parser)]
#[command(name = "rnmpc", version, about = "Regional nonlinear MPC toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the OCP at one state and print the solution record as JSON.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        x0: String,
    },
    /// Solve the OCP on a state grid and write the sample atlas.
    Explore {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridArgs,
        /// Atlas JSON output; a CSV with the same stem is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Group an atlas into feedback classes and fit verified ellipsoids.
    Regions {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        atlas: PathBuf,
        /// Region store output.
        #[arg(long)]
        store: PathBuf,
    },
    /// Closed-loop simulation with the regional controller.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        x0: String,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long, required_unless_present = "no_store")]
        store: Option<PathBuf>,
        /// Plain NMPC: solve the OCP at every step.
        #[arg(long)]
        no_store: bool,
        /// Trajectory CSV output.
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo coverage of the feasible set by a region store.
    Coverage {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: PathBuf,
        /// Sampling window `lo1,hi1,lo2,hi2,...`; defaults to the feasible
        /// bounding box of `--atlas`.
        #[arg(long, allow_hyphen_values = true)]
        window: Option<String>,
        #[arg(long)]
        atlas: Option<PathBuf>,
        /// Feasible samples to collect.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        /// JSON report output; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// explore, regions and coverage in one run, writing into a directory.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, default_value_t = 100_000)]
        coverage_samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// `builtin:<name>` or a JSON model file.
    #[arg(long, default_value = "builtin:pannocchia2011")]
    model: String,
    #[arg(long, default_value_t = 1e-6)]
    eps_act: f64,
    #[arg(long, default_value_t = 1e-8)]
    eps_lambda: f64,
    #[arg(long, default_value_t = 2011)]
    seed: u64,
}

#[derive(Args, Clone)]
struct GridArgs {
    /// Exploration window `lo1,hi1,lo2,hi2,...`.
    #[arg(long, allow_hyphen_values = true, default_value = "-6,6,-7,7")]
    window: String,
    /// Grid points per axis, `n1,n2,...`.
    #[arg(long, default_value = "241,241")]
    grid: String,
}

#[derive(Args, Clone)]
struct FitArgs {
    #[arg(long, default_value_t = 2)]
    max_ellipsoids: usize,
    #[arg(long, default_value_t = 2000)]
    verify_samples: usize,
}

#[derive(Debug)]
enum CliError {
    BadInput(String),
    Core(Error),
    Solve(SolveStatus),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Solve(status) => CliError::Solve(status),
            other => CliError::Core(other),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::BadInput(msg) => write!(f, "bad input: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Solve(status) => write!(f, "OCP solve failed: {status:?}"),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::BadInput(_) => exit::BAD_INPUT,
            CliError::Solve(SolveStatus::Infeasible) => exit::INFEASIBLE,
            CliError::Solve(_) => exit::SOLVER_FAILURE,
            CliError::Core(e) => match e {
                Error::ModelHashMismatch { .. } | Error::InvalidStore(_) => exit::STORE_REJECTED,
                Error::NoFeasibleSamples => exit::NO_FEASIBLE_SAMPLES,
                Error::DimensionMismatch { .. }
                | Error::InvalidModel(_)
                | Error::Contract(_)
                | Error::NotPositiveDefinite(_) => exit::BAD_INPUT,
                _ => exit::RUNTIME,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rnmpc: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Solve { common, x0 } => cmd_solve(&common, &x0),
        Command::Explore { common, grid, out } => cmd_explore(&common, &grid, &out),
        Command::Regions {
            common,
            fit,
            atlas,
            store,
        } => cmd_regions(&common, &fit, &atlas, &store),
        Command::Simulate {
            common,
            x0,
            steps,
            store,
            no_store,
            out,
        } => cmd_simulate(&common, &x0, steps, store.as_deref(), no_store, &out),
        Command::Coverage {
            common,
            store,
            window,
            atlas,
            samples,
            out,
        } => cmd_coverage(&common, &store, window.as_deref(), atlas.as_deref(), samples, out.as_deref()),
        Command::Pipeline {
            common,
            grid,
            fit,
            coverage_samples,
            out,
        } => cmd_pipeline(&common, &grid, &fit, coverage_samples, &out),
    }
}

fn parse_floats(text: &str, what: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::BadInput(format!("cannot parse {what} `{text}`")))
        })
        .collect()
}

fn parse_state(text: &str, model: &SystemModel) -> CliResult<DVector<f64>> {
    let v = parse_floats(text, "state")?;
    if v.len() != model.state_dim() {
        return Err(CliError::BadInput(format!(
            "state has {} components, model needs {}",
            v.len(),
            model.state_dim()
        )));
    }
    Ok(DVector::from_vec(v))
}

fn parse_window(text: &str) -> CliResult<Window> {
    let v = parse_floats(text, "window")?;
    if v.is_empty() || v.len() % 2 != 0 {
        return Err(CliError::BadInput(format!("window `{text}` needs lo,hi pairs")));
    }
    let (lower, upper) = v.chunks(2).map(|p| (p[0], p[1])).unzip();
    Window::new(lower, upper).map_err(|e| CliError::BadInput(e.to_string()))
}

fn parse_grid(args: &GridArgs) -> CliResult<GridSpec> {
    let window = parse_window(&args.window)?;
    let resolution = args
        .grid
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| CliError::BadInput(format!("cannot parse grid `{}`", args.grid)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    GridSpec::new(window, resolution).map_err(|e| CliError::BadInput(e.to_string()))
}

fn tolerances(common: &Common) -> CliResult<ActiveSetTolerances> {
    if !(common.eps_act > 0.0 && common.eps_lambda > 0.0) {
        return Err(CliError::BadInput("tolerances must be positive".into()));
    }
    Ok(ActiveSetTolerances {
        eps_act: common.eps_act,
        eps_lambda: common.eps_lambda,
    })
}

fn fit_params(common: &Common, fit: &FitArgs) -> CliResult<FitParams> {
    if fit.verify_samples == 0 {
        return Err(CliError::BadInput("--verify-samples must be positive".into()));
    }
    Ok(FitParams {
        max_ellipsoids: fit.max_ellipsoids,
        verify_samples: fit.verify_samples,
        seed: common.seed,
        ..FitParams::default()
    })
}

/// Configuration echoed into every output file.
fn metadata(common: &Common, model: &SystemModel, extra: &[(&str, Value)]) -> BTreeMap<String, Value> {
    let mut meta = BTreeMap::new();
    meta.insert("tool".into(), json!(concat!("rnmpc ", env!("CARGO_PKG_VERSION"))));
    meta.insert("model".into(), json!(common.model));
    meta.insert("model_hash".into(), json!(model.hash()));
    meta.insert("eps_act".into(), json!(common.eps_act));
    meta.insert("eps_lambda".into(), json!(common.eps_lambda));
    meta.insert("seed".into(), json!(common.seed));
    meta.insert(
        "solver".into(),
        serde_json::to_value(SolverConfig::default()).expect("solver config serializes"),
    );
    for (k, v) in extra {
        meta.insert((*k).to_string(), v.clone());
    }
    meta
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|source| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn one_based(v: &[usize]) -> Vec<usize> {
    v.iter().map(|i| i + 1).collect()
}

fn cmd_solve(common: &Common, x0: &str) -> CliResult<()> {
    let model = load_model(&common.model)?;
    let tol = tolerances(common)?;
    let x = parse_state(x0, &model)?;
    let inst = OcpInstance::new(&model, x.clone())?;
    let sol = SqpSolver::default().solve_ocp(&inst, None)?;
    let mut record = json!({
        "metadata": metadata(common, &model, &[]),
        "x0": x.as_slice(),
        "status": sol.status,
    });
    if sol.is_converged() {
        let info = classify_active_sets(&inst, &sol, tol.eps_act, tol.eps_lambda)?;
        let regular = check_region_regularity(&inst, &sol, &info)?;
        let a_tilde = saturated_subset(&info.active, model.input_rows());
        let fields = json!({
            "u_star": sol.first_input(model.input_dim()).as_slice(),
            "U": sol.u.as_slice(),
            "lambda": sol.lambda.as_slice(),
            "cost": sol.cost,
            "kkt_residual": sol.kkt_residual,
            "active": one_based(&info.active),
            "weakly_active": one_based(&info.weakly_active),
            "A_tilde": one_based(&a_tilde),
            "regular": regular,
        });
        for (k, v) in fields.as_object().expect("object literal") {
            record[k] = v.clone();
        }
    }
    println!("{}", serde_json::to_string_pretty(&record).expect("record serializes"));
    if sol.is_converged() {
        Ok(())
    } else {
        Err(CliError::Solve(sol.status))
    }
}

fn explore(common: &Common, grid: &GridArgs, model: &SystemModel) -> CliResult<SampleAtlas> {
    let spec = parse_grid(grid)?;
    let tol = tolerances(common)?;
    let start = Instant::now();
    let mut atlas = explore_grid(model, &spec, tol, &SolverConfig::default())?;
    atlas.metadata = metadata(common, model, &[]);
    eprintln!(
        "explored {} states in {:.1} s: {} feasible, {} distinct active sets",
        atlas.samples.len(),
        start.elapsed().as_secs_f64(),
        atlas.feasible_count(),
        atlas.distinct_active_sets().len()
    );
    Ok(atlas)
}

fn save_atlas(atlas: &SampleAtlas, json_path: &Path) -> CliResult<()> {
    atlas.save_json(json_path)?;
    let csv_path = json_path.with_extension("csv");
    let file = fs::File::create(&csv_path).map_err(|source| {
        CliError::Core(Error::Io {
            path: csv_path.clone(),
            source,
        })
    })?;
    atlas.write_csv(std::io::BufWriter::new(file))?;
    Ok(())
}

fn cmd_explore(common: &Common, grid: &GridArgs, out: &Path) -> CliResult<()> {
    let model = load_model(&common.model)?;
    let atlas = explore(common, grid, &model)?;
    save_atlas(&atlas, out)
}

/// Classes and the fitted store, plus a human-readable report.
fn regions(
    common: &Common,
    fit: &FitArgs,
    model: &SystemModel,
    atlas: &SampleAtlas,
) -> CliResult<(Vec<FeedbackClass>, RegionStore, String)> {
    let params = fit_params(common, fit)?;
    let classes = group_by_subset(atlas, model)?;
    let start = Instant::now();
    let fits = fit_classes(&classes, atlas, model, &params, &SolverConfig::default())?;
    eprintln!("fitted ellipsoids in {:.1} s", start.elapsed().as_secs_f64());
    let meta = metadata(
        common,
        model,
        &[
            ("max_ellipsoids", json!(fit.max_ellipsoids)),
            ("verify_samples", json!(fit.verify_samples)),
            ("grid", serde_json::to_value(&atlas.grid).expect("grid serializes")),
        ],
    );
    let store = RegionStore::from_fits(model, &fits, atlas.tolerances.into(), meta)?;

    let mut report = String::new();
    report += &format!(
        "atlas: {} states, {} feasible, {} distinct active sets\n",
        atlas.samples.len(),
        atlas.feasible_count(),
        atlas.distinct_active_sets().len()
    );
    report += &format!("feedback classes: {}\n", classes.len());
    for (class, fitted) in &fits {
        report += &format!(
            "  A_tilde {:?}: u* = {:?}, {} active sets, {} samples, {} ellipsoids covering {} samples\n",
            one_based(&class.a_tilde),
            class.u_star,
            class.member_active_sets.len(),
            class.samples.len(),
            fitted.len(),
            class
                .samples
                .iter()
                .filter(|&&i| fitted.iter().any(|f| f.ellipsoid.contains(&atlas.samples[i].x0)))
                .count()
        );
    }
    report += &format!("stored ellipsoids: {}\n", store.len());
    Ok((classes, store, report))
}

fn cmd_regions(common: &Common, fit: &FitArgs, atlas_path: &Path, store_path: &Path) -> CliResult<()> {
    let model = load_model(&common.model)?;
    let atlas = SampleAtlas::load_json(atlas_path)?;
    let (_, store, report) = regions(common, fit, &model, &atlas)?;
    store.save(store_path)?;
    print!("{report}");
    Ok(())
}

fn cmd_simulate(
    common: &Common,
    x0: &str,
    steps: usize,
    store_path: Option<&Path>,
    no_store: bool,
    out: &Path,
) -> CliResult<()> {
    let model = load_model(&common.model)?;
    let x = parse_state(x0, &model)?;
    if steps == 0 {
        return Err(CliError::BadInput("--steps must be at least 1".into()));
    }
    let store = match (no_store, store_path) {
        (true, _) => RegionStore::empty(&model),
        (false, Some(path)) => RegionStore::load(path, &model)?,
        (false, None) => return Err(CliError::BadInput("--store or --no-store is required".into())),
    };
    let traj = run_closed_loop(&x, steps, &store, &model, &SolverConfig::default())?;
    let meta = metadata(
        common,
        &model,
        &[
            ("x0", json!(x.as_slice())),
            ("steps", json!(steps)),
            (
                "store",
                json!(if no_store {
                    "none".to_string()
                } else {
                    store_path.map(|p| p.display().to_string()).unwrap_or_default()
                }),
            ),
            ("solve_time_us", json!("wall clock, not reproducible")),
        ],
    );
    let header: Vec<String> = meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf, &header)?;
    write_file(out, &String::from_utf8(buf).expect("csv is utf-8"))?;
    println!(
        "steps {} ocp_avoided {:.4} stage_cost {:.10} final_state {:?}",
        traj.records.len(),
        traj.ocp_avoided(),
        traj.stage_cost(&model),
        traj.final_state.as_slice()
    );
    match traj.failure {
        None => Ok(()),
        Some(status) => Err(CliError::Solve(status)),
    }
}

fn coverage_report(est: &CoverageEstimate, window: &Window, meta: BTreeMap<String, Value>) -> String {
    let report = json!({
        "metadata": meta,
        "window": window,
        "coverage": est,
    });
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    text
}

fn cmd_coverage(
    common: &Common,
    store_path: &Path,
    window: Option<&str>,
    atlas: Option<&Path>,
    samples: usize,
    out: Option<&Path>,
) -> CliResult<()> {
    let model = load_model(&common.model)?;
    let store = RegionStore::load(store_path, &model)?;
    let window = match (window, atlas) {
        (Some(text), _) => parse_window(text)?,
        (None, Some(path)) => SampleAtlas::load_json(path)?
            .feasible_bounding_box()
            .ok_or(CliError::Core(Error::NoFeasibleSamples))?,
        (None, None) => return Err(CliError::BadInput("--window or --atlas is required".into())),
    };
    let est = coverage_estimate(&store, &model, &window, samples, common.seed, &SolverConfig::default())?;
    let text = coverage_report(&est, &window, metadata(common, &model, &[("samples", json!(samples))]));
    match out {
        Some(path) => write_file(path, &text)?,
        None => print!("{text}"),
    }
    eprintln!("coverage {:.4} +- {:.4}", est.fraction, est.half_width);
    Ok(())
}

fn cmd_pipeline(common: &Common, grid: &GridArgs, fit: &FitArgs, coverage_samples: usize, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|source| {
        CliError::Core(Error::Io {
            path: out.to_path_buf(),
            source,
        })
    })?;
    let failed = out.join("FAILED");
    if failed.exists() {
        fs::remove_file(&failed).ok();
    }
    let result = pipeline_stages(common, grid, fit, coverage_samples, out);
    if let Err((stage, e)) = &result {
        let _ = fs::write(&failed, format!("stage: {stage}\nerror: {e}\n"));
    }
    result.map_err(|(_, e)| e)
}

/// Each stage's outputs are written before the next stage starts; on error
/// the failing stage is reported.
fn pipeline_stages(
    common: &Common,
    grid: &GridArgs,
    fit: &FitArgs,
    coverage_samples: usize,
    out: &Path,
) -> Result<(), (&'static str, CliError)> {
    let model = load_model(&common.model).map_err(|e| ("model", e.into()))?;
    let atlas = explore(common, grid, &model).map_err(|e| ("explore", e))?;
    save_atlas(&atlas, &out.join("atlas.json")).map_err(|e| ("explore", e))?;
    if atlas.feasible_count() == 0 {
        return Err(("explore", CliError::Core(Error::NoFeasibleSamples)));
    }

    let (classes, store, mut summary) = regions(common, fit, &model, &atlas).map_err(|e| ("regions", e))?;
    let classes_text = serde_json::to_string_pretty(&classes)
        .map_err(|e| ("regions", CliError::Core(e.into())))?;
    write_file(&out.join("classes.json"), &(classes_text + "\n")).map_err(|e| ("regions", e))?;
    store.save(&out.join("store.json")).map_err(|e| ("regions", e.into()))?;

    if coverage_samples > 0 {
        let window = atlas
            .feasible_bounding_box()
            .ok_or(("coverage", CliError::Core(Error::NoFeasibleSamples)))?;
        let est = coverage_estimate(&store, &model, &window, coverage_samples, common.seed, &SolverConfig::default())
            .map_err(|e| ("coverage", e.into()))?;
        let meta = metadata(common, &model, &[("samples", json!(coverage_samples))]);
        write_file(&out.join("coverage.json"), &coverage_report(&est, &window, meta)).map_err(|e| ("coverage", e))?;
        summary += &format!(
            "coverage: {:.4} +- {:.4} ({} feasible of {} draws in {:?} x {:?})\n",
            est.fraction, est.half_width, est.feasible, est.draws, window.lower, window.upper
        );
    }
    write_file(&out.join("summary.txt"), &summary).map_err(|e| ("summary", e))?;
    print!("{summary}");
    Ok(())
}
