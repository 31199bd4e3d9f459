//! Monte Carlo replay of a co-design solution in closed loop.
//!
//! The loop runs in batches, by default one per horizon. At the start of a
//! batch the controller senses
//! the true state `k_s` times, fuses the observations, re-optimizes the gain
//! schedule from the estimate, predicts the expected rollout and ships one
//! command per predicted step. The
//! batch reaches the device `d` steps later, where `d` is the realized cycle
//! time rounded up to whole steps. From then on the device executes the
//! command whose index matches the elapsed time since sensing. Each executed
//! command survives delivery with probability `1 - eps_c`, and a lost command
//! applies no control. When the elapsed time runs past the shipped commands,
//! the device holds zero control until the next batch arrives.
//!
//! Every run draws sensing noise, loss indicators and delays from separate
//! random streams keyed by the master seed and the run index (see
//! [`crate::rng`]), so runs are reproducible one by one.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::codesign::{solve, solve_inner, CodesignProblem, CodesignSolution, SolveStatus, SolverOptions};
use crate::error::{invalid, Error, Result};
use crate::estimation::{fuse, sample_observations, StateVector};
use crate::exec::{map_indexed, Execution};
use crate::plant::{apply_command, lyapunov_value, step_expected, GainSchedule};
use crate::rng::{stream_rng, Stream};

/// What the controller does with a fresh estimate at the start of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Replan {
    /// Re-optimize the gain schedule from the estimate, warm-started from
    /// the previous schedule, with `eps_c` held at the co-design value.
    #[default]
    Resolve,
    /// Reuse the co-design schedule as is.
    Schedule,
}

/// How the per-batch cycle time is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayModel {
    /// `D = min(D_exp, D_c_max)` with `D_exp` exponential of rate
    /// `ln(1/eps_c) / D_c_max`, so that `P(D_exp > D_c_max) = eps_c`.
    #[default]
    Sampled,
    /// The same number of steps for every batch.
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_runs: usize,
    /// Simulated steps per run.
    pub sim_horizon: usize,
    pub seed: u64,
    /// Settling band on `|delta|`, meters.
    pub settle_band: f64,
    /// Steps between batches; `None` means one batch per horizon `N`.
    pub replan_every: Option<usize>,
    pub replan: Replan,
    pub delay: DelayModel,
    /// Time at which the summary samples the mean `|delta|`, seconds.
    pub probe_time_s: f64,
    /// Simulate solutions that did not converge (stress tests).
    pub allow_unconverged: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_runs: 100,
            sim_horizon: 400,
            seed: 0,
            settle_band: 2.0,
            replan_every: None,
            replan: Replan::Resolve,
            delay: DelayModel::Sampled,
            probe_time_s: 10.0,
            allow_unconverged: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs < 1 {
            return Err(invalid("n_runs", "must be >= 1"));
        }
        if self.sim_horizon < 1 {
            return Err(invalid("sim_horizon", "must be >= 1"));
        }
        if !(self.settle_band > 0.0 && self.settle_band.is_finite()) {
            return Err(invalid("settle_band", format!("must be > 0, got {}", self.settle_band)));
        }
        if self.replan_every == Some(0) {
            return Err(invalid("replan_every", "must be >= 1"));
        }
        if !(self.probe_time_s >= 0.0) {
            return Err(invalid("probe_time_s", "must be >= 0"));
        }
        Ok(())
    }
}

/// One simulated step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t_index: usize,
    pub time_s: f64,
    pub state: StateVector,
    /// Controller-side prediction of this step's state from the latest batch.
    pub estimate: StateVector,
    /// Command that acted on the plant, if any.
    pub command: Option<f64>,
    /// A command was delivered and applied at this step.
    pub eta: bool,
    /// A command was due but lost in delivery.
    pub lost: bool,
    /// Delay in steps of the batch the device is executing.
    pub delay_steps: usize,
    /// Running sum of `x' P x + R_w u^2`, this step included.
    pub cum_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub run_id: usize,
    pub steps: Vec<StepRecord>,
}

/// Quality metrics of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub run_id: usize,
    /// Start of the final stretch inside the settling band, if any.
    pub settling_time_s: Option<f64>,
    /// Largest excursion past the target against the approach direction.
    pub overshoot_m: f64,
    /// RMS of `delta` after settling.
    pub jitter_rms_m: Option<f64>,
    pub commands_sent: u64,
    pub commands_lost: u64,
    pub hold_steps: u64,
    pub abs_delta_probe_m: f64,
    pub final_abs_delta_m: f64,
}

impl RunStats {
    pub fn from_record(rec: &TrajectoryRecord, sim: &SimConfig, t_d: f64) -> Self {
        let deltas: Vec<f64> = rec.steps.iter().map(|s| s.state.delta).collect();
        let outside = deltas.iter().rposition(|d| !(d.abs() <= sim.settle_band));
        let settle_idx = match outside {
            None => Some(0),
            Some(i) if i + 1 < deltas.len() => Some(i + 1),
            Some(_) => None,
        };
        let dir = if deltas[0] < 0.0 { -1.0 } else { 1.0 };
        let overshoot_m = deltas.iter().map(|d| -dir * d).fold(0.0, f64::max);
        let jitter_rms_m = settle_idx.map(|i| {
            let tail = &deltas[i..];
            (tail.iter().map(|d| d * d).sum::<f64>() / tail.len() as f64).sqrt()
        });
        let probe = ((sim.probe_time_s / t_d).round() as usize).min(deltas.len() - 1);
        let count = |f: fn(&StepRecord) -> bool| rec.steps.iter().filter(|s| f(s)).count() as u64;
        let commands_lost = count(|s| s.lost);
        Self {
            run_id: rec.run_id,
            settling_time_s: settle_idx.map(|i| i as f64 * t_d),
            overshoot_m,
            jitter_rms_m,
            commands_sent: count(|s| s.eta) + commands_lost,
            commands_lost,
            hold_steps: count(|s| !s.eta && !s.lost),
            abs_delta_probe_m: deltas[probe].abs(),
            final_abs_delta_m: deltas[deltas.len() - 1].abs(),
        }
    }
}

/// Commands shipped in one batch, stamped with the sensing step.
struct Batch {
    sensed_at: usize,
    arrives_at: usize,
    delay: usize,
    predicted: Vec<StateVector>,
    commands: Vec<f64>,
}

fn sample_delay<R: Rng + ?Sized>(model: DelayModel, d_c_max: f64, eps_c: f64, t_d: f64, cap: usize, rng: &mut R) -> usize {
    let d = match model {
        DelayModel::Fixed(d) => return d.min(cap),
        DelayModel::Sampled if eps_c <= 0.0 => 0.0,
        DelayModel::Sampled => match Exp::new((1.0 / eps_c).ln() / d_c_max) {
            Ok(e) if eps_c < 1.0 => e.sample(rng).min(d_c_max),
            _ => d_c_max,
        },
    };
    let steps = (d / t_d).ceil();
    if steps.is_finite() && steps < cap as f64 {
        steps as usize
    } else {
        cap
    }
}

fn check_solution(problem: &CodesignProblem, solution: &CodesignSolution, sim: &SimConfig) -> Result<()> {
    sim.validate()?;
    problem.validate()?;
    if solution.gains.horizon() != problem.horizon {
        return Err(Error::LengthMismatch(format!(
            "solution has {} gains, horizon is {}",
            solution.gains.horizon(),
            problem.horizon
        )));
    }
    if solution.status != SolveStatus::Converged && !sim.allow_unconverged {
        return Err(invalid(
            "solution",
            format!("status is {:?}; set allow_unconverged to simulate it anyway", solution.status),
        ));
    }
    Ok(())
}

/// Simulates run `run_id` of the Monte Carlo experiment.
pub fn run_closed_loop(
    problem: &CodesignProblem,
    solution: &CodesignSolution,
    sim: &SimConfig,
    opts: &SolverOptions,
    run_id: usize,
) -> Result<TrajectoryRecord> {
    check_solution(problem, solution, sim)?;
    opts.validate()?;
    Ok(simulate_run(problem, solution, sim, opts, run_id))
}

/// Gain schedule for a batch sensed at `x_hat`.
fn replan(problem: &CodesignProblem, eps_c: f64, opts: &SolverOptions, x_hat: StateVector, prev: &GainSchedule) -> GainSchedule {
    let local = CodesignProblem {
        x_ini: x_hat,
        ..problem.clone()
    };
    let local_opts = SolverOptions {
        keep_trace: false,
        ..opts.clone()
    };
    // inputs were validated up front, so the solve itself cannot fail
    solve_inner(&local, eps_c, &local_opts, Some(prev)).map_or_else(|_| prev.clone(), |out| out.gains)
}

fn simulate_run(
    problem: &CodesignProblem,
    solution: &CodesignSolution,
    sim: &SimConfig,
    opts: &SolverOptions,
    run_id: usize,
) -> TrajectoryRecord {
    let plant = &problem.plant;
    let weights = &problem.weights;
    let n = problem.horizon;
    let every = sim.replan_every.unwrap_or(n);
    let eps_c = solution.derived.eps_c;
    let t_d = plant.t_d;
    let cap = sim.sim_horizon + n;
    let run = run_id as u64;
    let mut sense_rng = stream_rng(sim.seed, run, Stream::Sensing);
    let mut loss_rng = stream_rng(sim.seed, run, Stream::Loss);
    let mut delay_rng = stream_rng(sim.seed, run, Stream::Delay);

    let mut x = problem.x_ini;
    let mut gains = solution.gains.clone();
    let mut batches: Vec<Batch> = Vec::new();
    let mut steps = Vec::with_capacity(sim.sim_horizon);
    let mut cum_cost = 0.0;
    for t in 0..sim.sim_horizon {
        if t % every == 0 {
            let obs = sample_observations(x, &problem.sensing, &mut sense_rng);
            let x_hat = fuse(&obs).expect("k_s >= 1 is validated");
            if sim.replan == Replan::Resolve {
                gains = replan(problem, eps_c, opts, x_hat, &gains);
            }
            let mut predicted = Vec::with_capacity(n);
            let mut commands = Vec::with_capacity(n);
            let mut p = x_hat;
            for k in &gains.gains {
                predicted.push(p);
                commands.push((k * p.to_vector())[0]);
                p = step_expected(plant, p, k, eps_c);
            }
            let delay = sample_delay(sim.delay, solution.derived.d_c_max, eps_c, t_d, cap, &mut delay_rng);
            batches.push(Batch {
                sensed_at: t,
                arrives_at: t.saturating_add(delay),
                delay,
                predicted,
                commands,
            });
            // batches sensed before the newest arrived one are dead
            if let Some(keep) = batches.iter().rposition(|b| b.arrives_at <= t) {
                batches.drain(..keep);
            }
        }
        let newest = batches.last().expect("a batch is sensed at t = 0");
        let active = batches.iter().rev().find(|b| b.arrives_at <= t);
        let due = active.and_then(|b| b.commands.get(t - b.sensed_at).copied());
        // the controller's view of the current state behind the executed command
        let view = active.unwrap_or(newest);
        let estimate = view.predicted.get(t - view.sensed_at).copied().unwrap_or(view.predicted[n - 1]);
        let delay_steps = view.delay;

        let draw: f64 = loss_rng.random();
        let (command, eta, lost) = match due {
            Some(u) if draw >= eps_c => (Some(u), true, false),
            Some(_) => (None, false, true),
            None => (None, false, false),
        };
        let u = command.unwrap_or(0.0);
        cum_cost += lyapunov_value(&weights.p, x) + weights.r_w * u * u;
        steps.push(StepRecord {
            t_index: t,
            time_s: t as f64 * t_d,
            state: x,
            estimate,
            command,
            eta,
            lost,
            delay_steps,
            cum_cost,
        });
        x = match command {
            Some(u) => apply_command(plant, x, u),
            None => StateVector::from_vector(&(plant.a_tilde * x.to_vector())),
        };
    }
    TrajectoryRecord { run_id, steps }
}

/// Mean and 95% Student-t half-width; the half-width is zero for fewer than
/// two samples.
fn mean_ci(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), Some(0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_or(1.96, |d| d.inverse_cdf(0.975));
    (Some(mean), Some(t * (var / n as f64).sqrt()))
}

/// Parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "k_s")]
    KS,
    #[serde(rename = "W_0")]
    W0,
    #[serde(rename = "D_0")]
    D0,
}

impl SweepParam {
    pub const NAMES: [&'static str; 3] = ["k_s", "W_0", "D_0"];

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::KS => "k_s",
            SweepParam::W0 => "W_0",
            SweepParam::D0 => "D_0",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "k_s" => Some(SweepParam::KS),
            "W_0" | "W_0_hz" => Some(SweepParam::W0),
            "D_0" | "D_0_s" => Some(SweepParam::D0),
            _ => None,
        }
    }

    /// Copy of `base` with this parameter set to `value`.
    pub fn apply(self, base: &CodesignProblem, value: f64) -> Result<CodesignProblem> {
        let p = match self {
            SweepParam::KS => {
                if !(value >= 1.0 && value.fract() == 0.0 && value <= f64::from(u32::MAX)) {
                    return Err(invalid("k_s", format!("must be a positive integer, got {value}")));
                }
                base.with_k_s(value as u32)
            }
            SweepParam::W0 => CodesignProblem { w_0: value, ..base.clone() },
            SweepParam::D0 => CodesignProblem { d_0: value, ..base.clone() },
        };
        p.validate()?;
        Ok(p)
    }
}

/// Summary row: the solution's decision variables and the Monte Carlo
/// aggregates over its runs. Empty fields mark undefined statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub param: Option<SweepParam>,
    pub value: Option<f64>,
    pub status: SolveStatus,
    pub feasible: bool,
    pub max_residual: f64,
    pub cost_j: f64,
    pub w_u_hz: f64,
    pub w_d_hz: f64,
    pub eps_u: f64,
    pub eps_d: f64,
    pub eps_c: f64,
    pub d_c_max_s: f64,
    pub n_runs: usize,
    pub settled_fraction: f64,
    pub settling_time_mean_s: Option<f64>,
    pub settling_time_ci95_s: Option<f64>,
    pub overshoot_mean_m: Option<f64>,
    pub overshoot_ci95_m: Option<f64>,
    pub jitter_rms_mean_m: Option<f64>,
    pub jitter_rms_ci95_m: Option<f64>,
    pub commands_sent: u64,
    pub commands_lost: u64,
    /// `commands_lost / commands_sent`.
    pub loss_rate: Option<f64>,
    /// Binomial standard error `sqrt(eps_c (1 - eps_c) / commands_sent)`.
    pub loss_se: Option<f64>,
    pub hold_rate: f64,
    pub abs_delta_probe_mean_m: Option<f64>,
    pub final_abs_delta_mean_m: Option<f64>,
}

impl SummaryRow {
    pub fn aggregate(solution: &CodesignSolution, stats: &[RunStats], feas_tol: f64) -> Self {
        let collect = |f: &dyn Fn(&RunStats) -> Option<f64>| stats.iter().filter_map(f).collect::<Vec<f64>>();
        let settle = collect(&|s| s.settling_time_s);
        let (settling_time_mean_s, settling_time_ci95_s) = mean_ci(&settle);
        let (overshoot_mean_m, overshoot_ci95_m) = mean_ci(&collect(&|s| Some(s.overshoot_m)));
        let (jitter_rms_mean_m, jitter_rms_ci95_m) = mean_ci(&collect(&|s| s.jitter_rms_m));
        let (abs_delta_probe_mean_m, _) = mean_ci(&collect(&|s| Some(s.abs_delta_probe_m)));
        let (final_abs_delta_mean_m, _) = mean_ci(&collect(&|s| Some(s.final_abs_delta_m)));
        let commands_sent: u64 = stats.iter().map(|s| s.commands_sent).sum();
        let commands_lost: u64 = stats.iter().map(|s| s.commands_lost).sum();
        let holds: u64 = stats.iter().map(|s| s.hold_steps).sum();
        let total_steps = commands_sent + holds;
        let eps_c = solution.derived.eps_c;
        let (loss_rate, loss_se) = if commands_sent > 0 {
            let n = commands_sent as f64;
            (
                Some(commands_lost as f64 / n),
                Some((eps_c * (1.0 - eps_c) / n).sqrt()),
            )
        } else {
            (None, None)
        };
        Self {
            param: None,
            value: None,
            status: solution.status,
            feasible: solution.status != SolveStatus::Infeasible && solution.residuals.is_feasible(feas_tol),
            max_residual: solution.residuals.max_violation(),
            cost_j: solution.cost_j,
            w_u_hz: solution.w_u,
            w_d_hz: solution.w_d,
            eps_u: solution.eps_u,
            eps_d: solution.eps_d,
            eps_c,
            d_c_max_s: solution.derived.d_c_max,
            n_runs: stats.len(),
            settled_fraction: settle.len() as f64 / stats.len().max(1) as f64,
            settling_time_mean_s,
            settling_time_ci95_s,
            overshoot_mean_m,
            overshoot_ci95_m,
            jitter_rms_mean_m,
            jitter_rms_ci95_m,
            commands_sent,
            commands_lost,
            loss_rate,
            loss_se,
            hold_rate: if total_steps > 0 { holds as f64 / total_steps as f64 } else { 0.0 },
            abs_delta_probe_mean_m,
            final_abs_delta_mean_m,
        }
    }

    /// Empirical loss rate within `k` binomial standard errors of `eps_c`.
    /// Rows without delivered commands pass vacuously.
    pub fn loss_calibrated(&self, k: f64) -> bool {
        match (self.loss_rate, self.loss_se) {
            (Some(rate), Some(se)) => (rate - self.eps_c).abs() <= k * se,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloResult {
    pub runs: Vec<TrajectoryRecord>,
    pub stats: Vec<RunStats>,
    pub summary: SummaryRow,
}

/// `sim.n_runs` independent runs; run `i` uses the streams of run index `i`,
/// so a larger experiment repeats a smaller one as its prefix.
pub fn monte_carlo(
    problem: &CodesignProblem,
    solution: &CodesignSolution,
    sim: &SimConfig,
    opts: &SolverOptions,
    exec: Execution,
) -> Result<MonteCarloResult> {
    check_solution(problem, solution, sim)?;
    opts.validate()?;
    let runs = map_indexed(exec, sim.n_runs, |i| simulate_run(problem, solution, sim, opts, i));
    let stats: Vec<RunStats> = runs.iter().map(|r| RunStats::from_record(r, sim, problem.plant.t_d)).collect();
    let summary = SummaryRow::aggregate(solution, &stats, opts.feas_tol);
    Ok(MonteCarloResult { runs, stats, summary })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub problem: CodesignProblem,
    pub solution: CodesignSolution,
    pub mc: MonteCarloResult,
}

/// Solves and simulates each value in turn. Non-converged solutions are
/// still simulated, and their rows carry the solver status.
pub fn sweep(
    base: &CodesignProblem,
    param: SweepParam,
    values: &[f64],
    opts: &SolverOptions,
    sim: &SimConfig,
    exec: Execution,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(invalid("values", "sweep needs at least one value"));
    }
    let stress = SimConfig {
        allow_unconverged: true,
        ..sim.clone()
    };
    values
        .iter()
        .map(|&value| {
            let problem = param.apply(base, value)?;
            let solution = solve(&problem, opts, exec)?;
            let mut mc = monte_carlo(&problem, &solution, &stress, opts, exec)?;
            mc.summary.param = Some(param);
            mc.summary.value = Some(value);
            Ok(SweepPoint {
                value,
                problem,
                solution,
                mc,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct TrajectoryRow {
    run_id: usize,
    t_index: usize,
    time_s: f64,
    delta_m: f64,
    v_mps: f64,
    a_mps2: f64,
    delta_hat_m: f64,
    command: Option<f64>,
    eta: u8,
    delay_steps: usize,
    cum_cost: f64,
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Csv(e.to_string())
}

/// Column order of the trajectory CSV.
pub const TRAJECTORY_HEADER: [&str; 11] = [
    "run_id",
    "t_index",
    "time_s",
    "delta_m",
    "v_mps",
    "a_mps2",
    "delta_hat_m",
    "command",
    "eta",
    "delay_steps",
    "cum_cost",
];

/// One row per step of every run.
pub fn write_trajectories_csv<W: Write>(out: W, runs: &[TrajectoryRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in runs {
        for s in &r.steps {
            w.serialize(TrajectoryRow {
                run_id: r.run_id,
                t_index: s.t_index,
                time_s: s.time_s,
                delta_m: s.state.delta,
                v_mps: s.state.v,
                a_mps2: s.state.a,
                delta_hat_m: s.estimate.delta,
                command: s.command,
                eta: u8::from(s.eta),
                delay_steps: s.delay_steps,
                cum_cost: s.cum_cost,
            })
            .map_err(csv_err)?;
        }
    }
    if runs.iter().all(|r| r.steps.is_empty()) {
        w.write_record(TRAJECTORY_HEADER).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

pub fn write_run_stats_csv<W: Write>(out: W, stats: &[RunStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in stats {
        w.serialize(s).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}
