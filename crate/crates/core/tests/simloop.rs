use std::sync::OnceLock;

use agv_codesign::codesign::{rollout_expected, solve, CodesignProblem, CodesignSolution, SolveStatus, SolverOptions};
use agv_codesign::exec::Execution;
use agv_codesign::plant::{lqr_gain, lyapunov_terms_unchecked, GainSchedule, lyapunov_value, stability_holds};
use agv_codesign::scenario::baseline_problem;
use agv_codesign::simloop::{
    monte_carlo, run_closed_loop, sweep, write_summary_csv, write_trajectories_csv, DelayModel, Replan, RunStats, SimConfig,
    StepRecord, SweepParam, TrajectoryRecord, TRAJECTORY_HEADER,
};
use agv_codesign::StateVector;

fn baseline() -> &'static (CodesignProblem, CodesignSolution) {
    static CELL: OnceLock<(CodesignProblem, CodesignSolution)> = OnceLock::new();
    CELL.get_or_init(|| {
        let problem = baseline_problem(10, 1.5e6, 0.15).unwrap();
        let sol = solve(&problem, &SolverOptions::default(), Execution::Parallel).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        (problem, sol)
    })
}

/// The baseline solution with its loop loss replaced.
fn with_loss(eps_c: f64) -> (CodesignProblem, CodesignSolution) {
    let (p, s) = baseline().clone();
    let mut s = s;
    s.derived.eps_c = eps_c;
    (p, s)
}

fn opts() -> SolverOptions {
    SolverOptions::default()
}

fn quick(n_runs: usize, sim_horizon: usize) -> SimConfig {
    SimConfig {
        n_runs,
        sim_horizon,
        seed: 11,
        ..SimConfig::default()
    }
}

#[test]
fn noiseless_lossless_run_replays_the_rollout() {
    let (mut problem, sol) = with_loss(0.0);
    problem.sensing.sigma = 0.0;
    let sim = SimConfig {
        replan: Replan::Schedule,
        delay: DelayModel::Fixed(0),
        ..quick(1, problem.horizon)
    };
    let rec = run_closed_loop(&problem, &sol, &sim, &opts(), 0).unwrap();
    let want = rollout_expected(&problem, &sol.gains, 0.0).unwrap();
    let got: Vec<StateVector> = rec.steps.iter().map(|s| s.state).collect();
    assert_eq!(got, want);
    assert!(rec.steps.iter().all(|s| s.eta && s.delay_steps == 0 && s.estimate == s.state));
}

#[test]
fn total_loss_is_open_loop() {
    let (problem, sol) = with_loss(1.0);
    let rec = run_closed_loop(&problem, &sol, &quick(1, 60), &opts(), 3).unwrap();
    let mut x = problem.x_ini.to_vector();
    for s in &rec.steps {
        assert_eq!(s.state.to_vector(), x);
        assert!(!s.eta && s.command.is_none());
        x = problem.plant.a_tilde * x;
    }
}

#[test]
fn doubling_runs_keeps_the_prefix() {
    let (problem, sol) = baseline();
    let small = monte_carlo(problem, sol, &quick(4, 80), &opts(), Execution::Parallel).unwrap();
    let large = monte_carlo(problem, sol, &quick(8, 80), &opts(), Execution::Serial).unwrap();
    assert_eq!(small.runs[..], large.runs[..4]);
    assert_eq!(small.stats[..], large.stats[..4]);
}

#[test]
fn csv_output_is_byte_identical_across_execution_modes() {
    let (problem, sol) = baseline();
    let bytes = |exec| {
        let mc = monte_carlo(problem, sol, &quick(6, 120), &opts(), exec).unwrap();
        let mut traj = Vec::new();
        write_trajectories_csv(&mut traj, &mc.runs).unwrap();
        let mut summary = Vec::new();
        write_summary_csv(&mut summary, &[mc.summary]).unwrap();
        (traj, summary)
    };
    assert_eq!(bytes(Execution::Parallel), bytes(Execution::Serial));
}

#[test]
fn sensing_noise_does_not_move_loss_draws() {
    let (problem, sol) = with_loss(0.3);
    let mut quiet = problem.clone();
    quiet.sensing.sigma = 0.01;
    let sim = quick(1, 200);
    let a = run_closed_loop(&problem, &sol, &sim, &opts(), 5).unwrap();
    let b = run_closed_loop(&quiet, &sol, &sim, &opts(), 5).unwrap();
    let pattern = |r: &TrajectoryRecord| r.steps.iter().map(|s| (s.eta, s.lost, s.delay_steps)).collect::<Vec<_>>();
    assert_eq!(pattern(&a), pattern(&b));
    assert_ne!(a.steps[50].state, b.steps[50].state);
}

#[test]
fn lost_steps_apply_no_control() {
    let (problem, sol) = with_loss(0.4);
    let rec = run_closed_loop(&problem, &sol, &quick(1, 200), &opts(), 2).unwrap();
    assert!(rec.steps.iter().any(|s| s.lost));
    for w in rec.steps.windows(2) {
        let drift = problem.plant.a_tilde * w[0].state.to_vector();
        if !w[0].eta {
            assert!(w[0].command.is_none());
            assert_eq!(w[1].state.to_vector(), drift);
        }
    }
}

#[test]
fn delay_beyond_the_batch_holds_zero_control() {
    let (problem, sol) = with_loss(0.0);
    let holds = |replan_every| {
        let sim = SimConfig {
            replan_every,
            delay: DelayModel::Fixed(2),
            ..quick(1, 40)
        };
        let rec = run_closed_loop(&problem, &sol, &sim, &opts(), 0).unwrap();
        assert!(rec.steps.iter().all(|s| !s.lost));
        rec.steps.iter().filter(|s| !s.eta).map(|s| s.t_index).collect::<Vec<_>>()
    };
    assert_eq!(holds(None), vec![0, 1, 10, 11, 20, 21, 30, 31]);
    // a batch every step: only the start-up gap is uncovered
    assert_eq!(holds(Some(1)), vec![0, 1]);
}

#[test]
fn per_step_batches_execute_the_delayed_index() {
    let (problem, sol) = with_loss(0.0);
    let sim = SimConfig {
        replan_every: Some(1),
        replan: Replan::Schedule,
        delay: DelayModel::Fixed(1),
        ..quick(1, 30)
    };
    let rec = run_closed_loop(&problem, &sol, &sim, &opts(), 0).unwrap();
    for w in rec.steps.windows(2).skip(1) {
        // the command at t was planned from the estimate sensed at t - 1
        let k = &sol.gains.gains[1];
        assert_eq!(w[1].command, Some((k * w[1].estimate.to_vector())[0]));
    }
}

#[test]
fn loss_rate_is_calibrated() {
    let (problem, sol) = with_loss(0.2);
    let mc = monte_carlo(&problem, &sol, &quick(40, 400), &opts(), Execution::Parallel).unwrap();
    let row = &mc.summary;
    assert!(row.commands_sent > 10_000);
    assert!(row.loss_calibrated(3.0), "{:?} vs {}", row.loss_rate, row.eps_c);
}

#[test]
fn single_run_aggregate_equals_the_run() {
    let (problem, sol) = baseline();
    let mc = monte_carlo(problem, sol, &quick(1, 400), &opts(), Execution::Serial).unwrap();
    let s = &mc.stats[0];
    let row = &mc.summary;
    assert_eq!(row.settling_time_mean_s, s.settling_time_s);
    assert_eq!(row.overshoot_mean_m, Some(s.overshoot_m));
    assert_eq!(row.jitter_rms_mean_m, s.jitter_rms_m);
    assert_eq!(row.commands_sent, s.commands_sent);
    assert_eq!(row.final_abs_delta_mean_m, Some(s.final_abs_delta_m));
}

#[test]
fn run_stats_on_a_hand_made_trajectory() {
    let deltas = [100.0, 50.0, 1.0, -3.0, 1.5, 0.5];
    let steps = deltas
        .iter()
        .enumerate()
        .map(|(t, &d)| StepRecord {
            t_index: t,
            time_s: t as f64 * 0.05,
            state: StateVector::new(d, 0.0, 0.0),
            estimate: StateVector::new(d, 0.0, 0.0),
            command: Some(0.0),
            eta: true,
            lost: false,
            delay_steps: 0,
            cum_cost: 0.0,
        })
        .collect();
    let rec = TrajectoryRecord { run_id: 0, steps };
    let sim = SimConfig {
        probe_time_s: 0.1,
        ..SimConfig::default()
    };
    let s = RunStats::from_record(&rec, &sim, 0.05);
    assert_eq!(s.settling_time_s, Some(0.2));
    assert_eq!(s.overshoot_m, 3.0);
    assert_eq!(s.jitter_rms_m, Some(((1.5f64 * 1.5 + 0.5 * 0.5) / 2.0).sqrt()));
    assert_eq!(s.abs_delta_probe_m, 1.0);
    assert_eq!(s.commands_sent, 6);
}

#[test]
fn never_settling_run_has_no_settling_time() {
    let (problem, sol) = with_loss(1.0);
    let sim = quick(1, 50);
    let rec = run_closed_loop(&problem, &sol, &sim, &opts(), 0).unwrap();
    let s = RunStats::from_record(&rec, &sim, problem.plant.t_d);
    assert_eq!(s.settling_time_s, None);
    assert_eq!(s.jitter_rms_m, None);
}

#[test]
fn lyapunov_drift_matches_the_stability_terms() {
    // fresh sensing every step and no delay: the first step's command is
    // K_1 x_hat with x_hat ~ N(X_ini, sigma^2/k_s I)
    let mut problem = baseline_problem(10, 1.5e6, 0.15).unwrap();
    problem.x_ini = StateVector::new(20.0, -1.0, 0.5);
    let eps_c = 0.2;
    let k = lqr_gain(&problem.plant, &problem.weights.p, problem.weights.r_w);
    let (_, base) = baseline();
    let mut sol = base.clone();
    sol.gains = GainSchedule::constant(k, problem.horizon);
    sol.derived.eps_c = eps_c;
    let sim = SimConfig {
        replan_every: Some(1),
        replan: Replan::Schedule,
        delay: DelayModel::Fixed(0),
        ..quick(20_000, 2)
    };
    let mc = monte_carlo(&problem, &sol, &sim, &opts(), Execution::Parallel).unwrap();
    let p = &problem.weights.p;
    let dv: Vec<f64> = mc
        .runs
        .iter()
        .map(|r| {
            let x1 = r.steps[1].state;
            lyapunov_value(p, x1) - lyapunov_value(p, problem.x_ini)
        })
        .collect();
    let n = dv.len() as f64;
    let mean = dv.iter().sum::<f64>() / n;
    let se = (dv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let (f1, f2) =
        lyapunov_terms_unchecked(&problem.plant, p, problem.x_ini, &sol.gains.gains[0], problem.noise_var());
    let check = stability_holds(f1, f2, eps_c);
    assert!(check.holds, "{check:?}");
    assert!((mean - check.residual).abs() <= 3.0 * se, "{mean} vs {} (se {se})", check.residual);
    assert!(mean <= 3.0 * se);
}

#[test]
fn unconverged_solutions_need_the_override() {
    let (problem, mut sol) = baseline().clone();
    sol.status = SolveStatus::Infeasible;
    assert!(run_closed_loop(&problem, &sol, &quick(1, 10), &opts(), 0).is_err());
    let sim = SimConfig {
        allow_unconverged: true,
        ..quick(1, 10)
    };
    assert!(run_closed_loop(&problem, &sol, &sim, &opts(), 0).is_ok());
}

#[test]
fn trajectory_csv_schema() {
    let (problem, sol) = with_loss(0.5);
    let rec = run_closed_loop(&problem, &sol, &quick(1, 30), &opts(), 0).unwrap();
    let mut buf = Vec::new();
    write_trajectories_csv(&mut buf, &[rec.clone()]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), TRAJECTORY_HEADER.join(","));
    assert_eq!(lines.clone().count(), 30);
    let lost = rec.steps.iter().position(|s| !s.eta).unwrap();
    let row: Vec<&str> = lines.nth(lost).unwrap().split(',').collect();
    assert_eq!(row[7], "");
    assert_eq!(row[8], "0");
}

#[test]
fn sweep_emits_one_row_per_value() {
    let problem = baseline_problem(10, 1.5e6, 0.15).unwrap();
    let points = sweep(
        &problem,
        SweepParam::KS,
        &[2.0, 10.0],
        &SolverOptions::default(),
        &quick(3, 60),
        Execution::Parallel,
    )
    .unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[0].problem.sensing.k_s, 2);
    assert_eq!(points[1].mc.summary.param, Some(SweepParam::KS));
    assert_eq!(points[1].mc.summary.value, Some(10.0));
    assert!(SweepParam::KS.apply(&problem, 2.5).is_err());
    assert!(sweep(&problem, SweepParam::W0, &[], &SolverOptions::default(), &quick(1, 10), Execution::Serial).is_err());
}

#[test]
fn replanning_from_the_estimate_keeps_a_noiseless_loop_tame() {
    // the co-design schedule is tuned to the trajectory from X_ini and makes
    // a poor feedback law elsewhere; re-solving per batch fixes that
    let (mut problem, _) = baseline().clone();
    problem.sensing.sigma = 0.0;
    let sol = solve(&problem, &opts(), Execution::Serial).unwrap();
    let run = |replan| {
        let sim = SimConfig { replan, ..quick(1, 400) };
        let rec = run_closed_loop(&problem, &sol, &sim, &opts(), 0).unwrap();
        RunStats::from_record(&rec, &sim, problem.plant.t_d)
    };
    let fixed = run(Replan::Schedule);
    let resolved = run(Replan::Resolve);
    assert!(fixed.overshoot_m > 10.0, "{fixed:?}");
    assert!(resolved.overshoot_m < 2.0, "{resolved:?}");
    assert!(resolved.settling_time_s.unwrap() < fixed.settling_time_s.unwrap());
}
