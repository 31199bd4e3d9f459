//! Batch driver: `solve`, `simulate`, `sweep` and `validate`.
//!
//! Every command that writes output first writes `manifest.json` into its
//! output directory. Passing that manifest back as `--config` repeats the run
//! and reproduces its CSV and JSON outputs byte for byte.

pub mod checks;
pub mod config;
pub mod error;
pub mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use agv_codesign::codesign::{solve, CodesignProblem, CodesignSolution};
use agv_codesign::exec::Execution;
use agv_codesign::simloop::{
    monte_carlo, sweep, write_run_stats_csv, write_summary_csv, write_trajectories_csv, MonteCarloResult, SweepParam,
};
use agv_codesign::TOOL_VERSION;
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

pub use error::CliError;
use config::ResolvedConfig;
use manifest::{load_config, load_solution, param_diff, write_json, RunManifest, SolutionFile, SweepSpec};

#[derive(Debug, Parser)]
#[command(name = "agv-codesign", version, about = "Sensing, communication and control co-design for a wireless AGV loop")]
pub struct Cli {
    /// Worker threads for grid and Monte Carlo evaluation (results do not depend on it).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the co-design problem and write solution.json.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a solution in Monte Carlo closed loop and write CSVs.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Solution file from `solve` (taken from the manifest when omitted).
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Solve and simulate for each value of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// One of k_s, W_0, D_0.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated values, e.g. 2,6,10.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Run the property checks on the configured problem.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Directory for validate.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses arguments and runs the command, writing progress to `stdout`.
pub fn run<W: Write + Send>(cli: Cli, stdout: &mut W) -> Result<(), CliError> {
    let jobs = cli.jobs;
    if jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be >= 1".into()));
    }
    with_jobs(jobs, move |exec| match cli.command {
        Command::Solve { common, out } => cmd_solve(&common, &out, exec, stdout),
        Command::Simulate { common, out, solution } => cmd_simulate(&common, &out, solution.as_deref(), exec, stdout),
        Command::Sweep {
            common,
            out,
            param,
            values,
        } => cmd_sweep(&common, &out, param, values, exec, stdout),
        Command::Validate { common, out } => cmd_validate(&common, out.as_deref(), stdout),
    })
}

#[cfg(feature = "parallel")]
fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce(Execution) -> Result<T, CliError> + Send) -> Result<T, CliError> {
    if jobs == Some(1) {
        return f(Execution::Serial);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .context("starting worker threads")?;
    pool.install(|| f(Execution::Parallel))
}

#[cfg(not(feature = "parallel"))]
fn with_jobs<T: Send>(_jobs: Option<usize>, f: impl FnOnce(Execution) -> Result<T, CliError> + Send) -> Result<T, CliError> {
    f(Execution::Serial)
}

fn prepare(common: &Common) -> Result<(ResolvedConfig, Option<RunManifest>), CliError> {
    let (mut cfg, manifest) = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.sim.seed = seed;
    }
    cfg.solver.validate()?;
    cfg.sim.validate()?;
    Ok((cfg, manifest))
}

fn manifest_for(
    command: &str,
    common: &Common,
    cfg: &ResolvedConfig,
    out: &Path,
    solution_path: Option<String>,
    sweep: Option<SweepSpec>,
) -> RunManifest {
    RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        command: command.to_string(),
        config_path: common.config.display().to_string(),
        seed: cfg.sim.seed,
        out_dir: out.display().to_string(),
        params: cfg.params.clone(),
        solver: cfg.solver.clone(),
        sim: cfg.sim.clone(),
        solution_path,
        sweep,
    }
}

fn create_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

fn io<T>(r: std::io::Result<T>) -> Result<T, CliError> {
    r.context("writing to stdout").map_err(CliError::Internal)
}

fn report_solution<W: Write>(w: &mut W, sol: &CodesignSolution) -> Result<(), CliError> {
    let r = &sol.residuals;
    let status = serde_json::to_value(sol.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    io(writeln!(w, "status        {status}"))?;
    io(writeln!(w, "cost J        {:.6e}", sol.cost_j))?;
    io(writeln!(w, "W_u, W_d      {:.6e} Hz, {:.6e} Hz", sol.w_u, sol.w_d))?;
    io(writeln!(w, "eps_u, eps_d  {:.6e}, {:.6e} (eps_c {:.6e})", sol.eps_u, sol.eps_d, sol.derived.eps_c))?;
    io(writeln!(w, "D_c_max       {:.6e} s", sol.derived.d_c_max))?;
    io(writeln!(w, "residuals (<= 0 satisfied)"))?;
    for (name, v) in [
        ("capacity_uplink", r.capacity_uplink),
        ("capacity_downlink", r.capacity_downlink),
        ("cycle_time", r.cycle_time),
        ("stability", r.stability),
        ("bandwidth", r.bandwidth),
        ("loss_box", r.loss_box),
    ] {
        io(writeln!(w, "  {name:<18} {v:+.6e}"))?;
    }
    io(writeln!(w, "  stability worst at step {}", r.stability_step))?;
    if r.link_infeasible {
        io(writeln!(w, "  a link rate is non-positive at this bandwidth split"))?;
    }
    Ok(())
}

fn write_mc(dir: &Path, mc: &MonteCarloResult) -> Result<(), CliError> {
    let file = |name: &str| -> Result<std::io::BufWriter<fs::File>, CliError> {
        let p = dir.join(name);
        Ok(std::io::BufWriter::new(
            fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?,
        ))
    };
    write_trajectories_csv(file("trajectories.csv")?, &mc.runs)?;
    write_run_stats_csv(file("runs.csv")?, &mc.stats)?;
    write_summary_csv(file("summary.csv")?, std::slice::from_ref(&mc.summary))?;
    Ok(())
}

fn cmd_solve<W: Write>(common: &Common, out: &Path, exec: Execution, w: &mut W) -> Result<(), CliError> {
    let (cfg, _) = prepare(common)?;
    let problem = cfg.params.build()?;
    create_dir(out)?;
    write_json(&out.join("manifest.json"), &manifest_for("solve", common, &cfg, out, None, None))?;
    let solution = solve(&problem, &cfg.solver, exec)?;
    let file = SolutionFile {
        tool_version: TOOL_VERSION.to_string(),
        params: cfg.params,
        solver: cfg.solver,
        solution,
    };
    write_json(&out.join("solution.json"), &file)?;
    report_solution(w, &file.solution)?;
    io(writeln!(w, "wrote {}", out.join("solution.json").display()))
}

fn cmd_simulate<W: Write>(
    common: &Common,
    out: &Path,
    solution: Option<&Path>,
    exec: Execution,
    w: &mut W,
) -> Result<(), CliError> {
    let (cfg, manifest) = prepare(common)?;
    let path: PathBuf = match (solution, manifest.as_ref().and_then(|m| m.solution_path.clone())) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(CliError::Usage("simulate needs --solution <solution.json>".into())),
    };
    let file = load_solution(&path)?;
    let diff = param_diff(&cfg.params, &file.params);
    if !diff.is_empty() {
        return Err(CliError::Validation(format!(
            "config and solution file disagree on: {}",
            diff.join(", ")
        )));
    }
    let problem: CodesignProblem = cfg.params.build()?;
    create_dir(out)?;
    write_json(
        &out.join("manifest.json"),
        &manifest_for("simulate", common, &cfg, out, Some(path.display().to_string()), None),
    )?;
    let mc = monte_carlo(&problem, &file.solution, &cfg.sim, &cfg.solver, exec)?;
    write_mc(out, &mc)?;
    let s = &mc.summary;
    io(writeln!(
        w,
        "{} runs x {} steps; settled {:.0}%, loss rate {} (eps_c {:.3e})",
        s.n_runs,
        cfg.sim.sim_horizon,
        100.0 * s.settled_fraction,
        s.loss_rate.map_or("n/a".into(), |v| format!("{v:.3e}")),
        s.eps_c
    ))?;
    io(writeln!(w, "wrote {}", out.display()))
}

fn cmd_sweep<W: Write>(
    common: &Common,
    out: &Path,
    param: Option<String>,
    values: Option<Vec<f64>>,
    exec: Execution,
    w: &mut W,
) -> Result<(), CliError> {
    let (cfg, manifest) = prepare(common)?;
    let recorded = manifest.and_then(|m| m.sweep);
    let name = param
        .or_else(|| recorded.as_ref().map(|s| s.param.clone()))
        .ok_or_else(|| CliError::Usage("sweep needs --param".into()))?;
    let values = values
        .or_else(|| recorded.map(|s| s.values))
        .ok_or_else(|| CliError::Usage("sweep needs --values".into()))?;
    let param = SweepParam::parse(&name).ok_or_else(|| {
        CliError::Usage(format!("unknown sweep parameter `{name}`; valid names: {}", SweepParam::NAMES.join(", ")))
    })?;
    if values.is_empty() {
        return Err(CliError::Usage("--values is empty".into()));
    }
    let base = cfg.params.build()?;
    for &v in &values {
        param.apply(&base, v)?;
    }
    create_dir(out)?;
    let spec = SweepSpec {
        param: param.name().to_string(),
        values: values.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest_for("sweep", common, &cfg, out, None, Some(spec)))?;
    let points = sweep(&base, param, &values, &cfg.solver, &cfg.sim, exec)?;
    let mut rows = Vec::with_capacity(points.len());
    for pt in &points {
        let dir = out.join(format!("{}_{}", param.name(), pt.value));
        create_dir(&dir)?;
        let mut params = cfg.params.clone();
        match param {
            SweepParam::KS => params.k_s = pt.problem.sensing.k_s,
            SweepParam::W0 => params.w_0_hz = pt.value,
            SweepParam::D0 => params.d_0_s = pt.value,
        }
        write_json(
            &dir.join("solution.json"),
            &SolutionFile {
                tool_version: TOOL_VERSION.to_string(),
                params,
                solver: cfg.solver.clone(),
                solution: pt.solution.clone(),
            },
        )?;
        write_mc(&dir, &pt.mc)?;
        let s = &pt.mc.summary;
        io(writeln!(
            w,
            "{}={:<10} {:<15} settled {:>3.0}%  jitter {}  loss {}",
            param.name(),
            pt.value,
            format!("{:?}", s.status),
            100.0 * s.settled_fraction,
            s.jitter_rms_mean_m.map_or("n/a".into(), |v| format!("{v:.3e} m")),
            s.loss_rate.map_or("n/a".into(), |v| format!("{v:.3e}")),
        ))?;
        rows.push(s.clone());
    }
    let path = out.join("summary.csv");
    let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_summary_csv(std::io::BufWriter::new(f), &rows)?;
    io(writeln!(w, "wrote {}", out.display()))
}

fn cmd_validate<W: Write>(common: &Common, out: Option<&Path>, w: &mut W) -> Result<(), CliError> {
    let (cfg, _) = prepare(common)?;
    let problem = cfg.params.build_unchecked()?;
    let report = checks::run_checks(&problem, &cfg.solver);
    for c in &report.checks {
        let tag = match c.outcome {
            checks::Outcome::Pass => "PASS",
            checks::Outcome::Fail => "FAIL",
            checks::Outcome::Skip => "SKIP",
        };
        io(writeln!(w, "{tag} {:<26} {}", c.name, c.detail))?;
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("validate.json"), &report)?;
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| c.outcome == checks::Outcome::Fail)
            .map(|c| c.name)
            .collect();
        Err(CliError::Validation(format!("failed checks: {}", failed.join(", "))))
    }
}
