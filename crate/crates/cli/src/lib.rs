//! Command-line front end. Exit codes: 0 success or passed check, 1 failed
//! check, 2 usage or configuration error, 3 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use moreau::certificates::{build_discrete_certificate, check_continuous, check_discrete, synthesize_continuous, CheckEntry, CheckReport};
use moreau::config::{CrowdFile, ProblemConfig, SweepingConfig};
use moreau::crowd;
use moreau::dynamics::{catching_up, eta_from_trajectory, eta_terminal, DiscreteTrajectory, SweepingProblem};
use moreau::optimizer::{solve_discrete, SolveOptions, SolveStatus};
use moreau::transcription::DiscreteProblem;
use moreau::Error;
use nalgebra::DVector;
use serde_json::json;

pub mod table;

use table::PlotData;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::InfeasibleStart(_) | Error::DimensionMismatch(_) | Error::DependentGenerators => EXIT_USAGE,
                _ => EXIT_NUMERICAL,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "moreau", version, about = "Simulate, optimize and certify controlled sweeping processes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the catching-up scheme with the control `a` given in the config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        emit_plot_data: Option<PathBuf>,
    },
    /// Solve the discretized problem; writes the trajectory CSV and a JSON summary.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        grid: usize,
        /// Overrides the window parameter of the config.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 4)]
        multistart: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stationarity tolerance.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Summary JSON; defaults to the output path with a `.json` extension.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        emit_plot_data: Option<PathBuf>,
    },
    /// Build and check a dual certificate for a trajectory CSV.
    Check {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        solution: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Report JSON; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Solve a crowd-in-a-corridor problem exactly.
    Crowd {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Mesh used to sample the solution for its certificate.
        #[arg(long, default_value_t = 600)]
        grid: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long)]
        emit_plot_data: Option<PathBuf>,
    },
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command) -> Result<i32, CliError> {
    match cmd {
        Command::Simulate { config, grid, out, emit_plot_data } => cmd_simulate(config, *grid, out, emit_plot_data.as_deref()),
        Command::Optimize { config, grid, tau, multistart, seed, tol, out, report, emit_plot_data } => {
            let opts = OptimizeArgs { grid: *grid, tau: *tau, multistart: *multistart, seed: *seed, tol: *tol };
            cmd_optimize(config, &opts, out, report.as_deref(), emit_plot_data.as_deref())
        }
        Command::Check { config, solution, tol, report } => cmd_check(config, solution, *tol, report.as_deref()),
        Command::Crowd { config, out, grid, tol, emit_plot_data } => cmd_crowd(config, out, *grid, *tol, emit_plot_data.as_deref()),
    }
}

fn sweeping_config(path: &Path) -> Result<SweepingConfig, CliError> {
    match ProblemConfig::load(path)? {
        ProblemConfig::Sweeping(s) => Ok(s),
        ProblemConfig::Crowd(_) => Err(CliError::Usage(format!("{}: expected kind \"sweeping\"", path.display()))),
    }
}

fn crowd_config(path: &Path) -> Result<CrowdFile, CliError> {
    match ProblemConfig::load(path)? {
        ProblemConfig::Crowd(c) => Ok(c),
        ProblemConfig::Sweeping(_) => Err(CliError::Usage(format!("{}: expected kind \"crowd\"", path.display()))),
    }
}

fn check_grid(k: usize) -> Result<(), CliError> {
    if k == 0 {
        return Err(CliError::Usage("--grid must be positive".into()));
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn eta_columns(p: &SweepingProblem, traj: &DiscreteTrajectory) -> Result<(Vec<DVector<f64>>, DVector<f64>), CliError> {
    let eta = eta_from_trajectory(p, traj)?;
    let last = eta.last().cloned().unwrap_or_else(|| DVector::zeros(p.m()));
    let end = eta_terminal(p, traj, &last)?;
    Ok((eta, end))
}

fn emit_plot(path: Option<&Path>, traj: &DiscreteTrajectory, eta: &[DVector<f64>]) -> Result<(), CliError> {
    let Some(path) = path else { return Ok(()) };
    let mut plot = PlotData::default();
    plot.push_trajectory(traj);
    for (j, e) in eta.iter().enumerate() {
        for (i, &v) in e.iter().enumerate() {
            plot.push("eta", i + 1, traj.mesh.t(j), v);
        }
    }
    plot.write(path)
}

pub fn cmd_simulate(config: &Path, grid: usize, out: &Path, plot: Option<&Path>) -> Result<i32, CliError> {
    check_grid(grid)?;
    let cfg = sweeping_config(config)?;
    let p = cfg.build()?;
    let a = cfg.a_path()?;
    let u = p.u.path().clone();
    let traj = catching_up(&p, |t| u.at(t), |t| a.at(t), grid)?;
    let (eta, end) = eta_columns(&p, &traj)?;
    table::write_trajectory(out, &traj, &eta, &end)?;
    emit_plot(plot, &traj, &eta)?;
    Ok(EXIT_OK)
}

pub struct OptimizeArgs {
    pub grid: usize,
    pub tau: Option<f64>,
    pub multistart: usize,
    pub seed: u64,
    pub tol: Option<f64>,
}

pub fn cmd_optimize(config: &Path, args: &OptimizeArgs, out: &Path, report: Option<&Path>, plot: Option<&Path>) -> Result<i32, CliError> {
    check_grid(args.grid)?;
    if args.multistart == 0 {
        return Err(CliError::Usage("--multistart must be positive".into()));
    }
    let cfg = sweeping_config(config)?;
    let mut p = cfg.build()?;
    if let Some(tau) = args.tau {
        p.tau = tau;
        p.validate()?;
    }
    let mut opts = SolveOptions { multistart: args.multistart, seed: args.seed, ..Default::default() };
    if let Some(tol) = args.tol {
        opts.tol = tol;
    }
    let dp = DiscreteProblem::new(p.clone(), args.grid)?;
    let sol = solve_discrete(&dp, &opts)?;
    let (eta, end) = eta_columns(&p, &sol.traj)?;
    table::write_trajectory(out, &sol.traj, &eta, &end)?;
    let cert = match build_discrete_certificate(&dp, &sol, 1e-6) {
        Ok(c) => {
            let rep = check_discrete(&dp, &sol.traj, &c, 1e-6);
            json!({ "verdict": rep.verdict, "lambda": rep.lambda, "failed": failed_ids(&rep) })
        }
        Err(e) => json!({ "verdict": false, "error": e.to_string() }),
    };
    let summary = json!({
        "cost": sol.cost,
        "status": sol.status.as_str(),
        "stationarity": sol.stationarity,
        "max_violation": sol.max_violation,
        "iterations": sol.iterations,
        "start_index": sol.start_index,
        "grid": args.grid,
        "multistart": args.multistart,
        "seed": args.seed,
        "discrete_certificate": cert,
    });
    let report = report.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("json"));
    write_json(&report, &summary)?;
    emit_plot(plot, &sol.traj, &eta)?;
    Ok(if sol.status == SolveStatus::MaxIterExceeded { EXIT_NUMERICAL } else { EXIT_OK })
}

fn failed_ids(rep: &CheckReport) -> Vec<String> {
    rep.entries.iter().filter(|e| !e.passed).map(|e| e.id.clone()).collect()
}

pub fn cmd_check(config: &Path, solution: &Path, tol: f64, report: Option<&Path>) -> Result<i32, CliError> {
    if !(tol > 0.0) {
        return Err(CliError::Usage("--tol must be positive".into()));
    }
    let cfg = sweeping_config(config)?;
    let p = cfg.build()?;
    let traj = table::read_trajectory(solution, p.n, p.d, p.m(), p.horizon)?;
    let failed = |id: &str, residual: f64, note: String| CheckReport {
        verdict: false,
        lambda: 0.0,
        degenerate: false,
        entries: vec![CheckEntry { id: id.into(), passed: false, residual, tolerance: tol, t: None, note: Some(note) }],
        notes: Vec::new(),
    };
    // a trajectory that is not a solution of the dynamics is a failed
    // check, not an input error
    let rep = match synthesize_continuous(&p, &traj, tol) {
        Ok(cert) => check_continuous(&p, &traj, &cert, tol),
        Err(e @ Error::NoConsistentDuals { residual }) => failed("dual_multipliers", residual, e.to_string()),
        Err(e @ Error::NotInCone { residual }) => failed("primal_representation", residual, e.to_string()),
        Err(e @ Error::InfeasiblePoint { violation, .. }) => failed("state_constraint", violation, e.to_string()),
        Err(e) => return Err(e.into()),
    };
    match report {
        Some(path) => write_json(path, &rep)?,
        None => println!("{}", serde_json::to_string_pretty(&rep).map_err(|e| CliError::Usage(e.to_string()))?),
    }
    if !rep.verdict {
        eprintln!("check failed: {}", failed_ids(&rep).join(", "));
    }
    Ok(if rep.verdict { EXIT_OK } else { EXIT_CHECK_FAILED })
}

pub fn cmd_crowd(config: &Path, out: &Path, grid: usize, tol: f64, plot: Option<&Path>) -> Result<i32, CliError> {
    check_grid(grid)?;
    let file = crowd_config(config)?;
    let cfg = file.build()?;
    let sol = crowd::solve_crowd(&cfg)?;
    let certificate = if cfg.n >= 2 {
        let alpha = crowd::default_alpha(&cfg, &sol.trajectory);
        let p = crowd::embed(&cfg, alpha)?;
        let traj = crowd::sample(&p, &sol.trajectory, &sol.a_bar, grid);
        let cert = crowd::crowd_certificate(&p, &traj)?;
        let rep = check_continuous(&p, &traj, &cert, tol);
        let atom: Vec<f64> = cert.gamma_atoms[grid].iter().copied().collect();
        let first_contact = sol.trajectory.contact_times.iter().flatten().copied().filter(|&t| t > 0.0).fold(f64::INFINITY, f64::min);
        let early_mass = if first_contact.is_finite() { Some(cert.gamma_mass(0.0, (first_contact - 0.01).max(0.0))) } else { None };
        let mut summary = json!({
            "verdict": rep.verdict,
            "lambda": rep.lambda,
            "alpha": alpha,
            "grid": grid,
            "failed": failed_ids(&rep),
            "gamma_atom_T": atom,
            "p_x": cert.px[0].iter().copied().collect::<Vec<_>>(),
            "q_x": cert.q[0].rows(0, cfg.n).iter().copied().collect::<Vec<_>>(),
            "gamma_mass_before_first_contact": early_mass,
        });
        if let Some(r) = &file.reference_gamma_atom {
            let diff: Vec<f64> = r.iter().zip(&atom).map(|(r, a)| a - r).collect();
            summary["reference_gamma_atom"] = json!({
                "reference": r,
                "computed": atom,
                "difference": diff,
                "note": "the computed atom follows from the adjoint, transversality and velocity matching conditions"
            });
        }
        summary
    } else {
        json!(null)
    };
    let result = json!({
        "a_bar": sol.a_bar,
        "cost": sol.cost,
        "contact_times": sol.trajectory.contact_times,
        "final_contacts": sol.pattern,
        "segments": sol.trajectory.segments,
        "relations": sol.relations,
        "branches": sol.branches,
        "refine_gain": sol.refine_gain,
        "x_T": sol.trajectory.end(),
        "certificate_summary": certificate,
    });
    write_json(out, &result)?;
    if let Some(path) = plot {
        let mut data = PlotData::default();
        let mut times: Vec<f64> = (0..=grid).map(|j| cfg.horizon * j as f64 / grid as f64).collect();
        times.extend(sol.trajectory.segments.iter().map(|s| s.t0));
        times.sort_by(f64::total_cmp);
        times.dedup();
        for t in times {
            for (i, x) in sol.trajectory.at(t).iter().enumerate() {
                data.push("x", i + 1, t, *x);
            }
            for (i, e) in sol.trajectory.eta_at(t).iter().enumerate() {
                data.push("eta", i + 1, t, *e);
            }
        }
        data.write(path)?;
    }
    Ok(EXIT_OK)
}
