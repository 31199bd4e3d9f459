use agv_codesign::codesign::{
    control_cost, cost_gradient, evaluate_constraints, expected_cost, gradient_check, rollout_expected, solve,
    solve_inner, CodesignProblem, CodesignSolution, GainMode, SolveStatus, SolverOptions,
};
use agv_codesign::exec::Execution;
use agv_codesign::plant::{build_plant, lqr_gain, Gain, GainSchedule, StabilityWeights};
use agv_codesign::scenario::baseline_problem;
use agv_codesign::StateVector;
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Plain-array rollout and cost, written without the library's linear algebra.
fn brute_force(problem: &CodesignProblem, gains: &[[f64; 3]], eps_c: f64) -> (Vec<[f64; 3]>, f64) {
    let ts = problem.plant.t_d;
    let lag = -1.0 / problem.plant.varsigma;
    let p = problem.weights.p;
    let s = problem.weights.s;
    let quad = |m: &Matrix3<f64>, x: &[f64; 3]| {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += x[i] * m[(i, j)] * x[j];
            }
        }
        acc
    };
    let x0 = problem.x_ini.as_array();
    let mut xs = vec![x0];
    let mut cost = 0.0;
    for t in 0..problem.horizon - 1 {
        let x = xs[t];
        let k = gains[t];
        let u = k[0] * x[0] + k[1] * x[1] + k[2] * x[2];
        cost += quad(&p, &x) + problem.weights.r_w * u * u;
        let next = [
            x[0] + ts * x[1],
            x[1] + ts * x[2],
            x[2] + ts * lag * x[2] + (1.0 - eps_c) * ts * lag * u,
        ];
        xs.push(next);
    }
    cost += quad(&s, xs.last().unwrap());
    (xs, cost)
}

/// Finite-horizon LQ optimum `x_1' Pi_1 x_1` by backward Riccati recursion.
fn riccati_optimum(problem: &CodesignProblem, eps_c: f64) -> f64 {
    let a = problem.plant.a_tilde;
    let b = problem.plant.b_tilde * (1.0 - eps_c);
    let r = problem.weights.r_w;
    let mut pi = problem.weights.s;
    for _ in 0..problem.horizon - 1 {
        let pb = pi * b;
        let apb = a.transpose() * pb;
        pi = problem.weights.p + a.transpose() * pi * a - apb * apb.transpose() / (r + b.dot(&pb));
    }
    let x = problem.x_ini.to_vector();
    x.dot(&(pi * x))
}

fn baseline() -> CodesignProblem {
    baseline_problem(10, 1.5e6, 0.15).unwrap()
}

fn lqr_schedule(problem: &CodesignProblem) -> GainSchedule {
    GainSchedule::constant(lqr_gain(&problem.plant, &problem.weights.p, problem.weights.r_w), problem.horizon)
}

fn fixture_gains(n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|t| [0.08 + 0.01 * t as f64, 0.6 - 0.02 * t as f64, -0.3]).collect()
}

fn schedule(g: &[[f64; 3]]) -> GainSchedule {
    GainSchedule {
        gains: g.iter().map(|k| Gain::new(k[0], k[1], k[2])).collect(),
    }
}

#[test]
fn control_cost_trivial_cases() {
    let w = StabilityWeights::identity(0.01);
    let zeros = vec![StateVector::default(); 4];
    assert_eq!(control_cost(&zeros, &[0.0; 3], &w).unwrap(), 0.0);
    let states = [StateVector::new(1.0, 0.0, 0.0), StateVector::default()];
    assert_eq!(control_cost(&states, &[0.0], &w).unwrap(), 1.0);
    assert!(control_cost(&states, &[0.0, 0.0], &w).is_err());
    assert!(control_cost(&[], &[], &w).is_err());
}

#[test]
fn cost_matches_brute_force_rollout() {
    let problem = baseline();
    let g = fixture_gains(problem.horizon);
    let (xs, want) = brute_force(&problem, &g, 0.0);
    let got = expected_cost(&problem, &schedule(&g), 0.0).unwrap();
    assert!(rel(got, want) < 1e-9, "{got} vs {want}");
    let states = rollout_expected(&problem, &schedule(&g), 0.0).unwrap();
    for (s, x) in states.iter().zip(&xs) {
        for (a, b) in s.as_array().iter().zip(x) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn rollout_fixture_trajectory() {
    // first three states of the fixture schedule on the baseline plant,
    // computed by hand from the Euler recursion
    let problem = baseline();
    let g = fixture_gains(problem.horizon);
    let states = rollout_expected(&problem, &schedule(&g), 0.0).unwrap();
    assert_eq!(states.len(), problem.horizon);
    let x2 = [100.0, 0.0, -3.2];
    let x3 = [100.0, -0.16, -5.904];
    for (s, want) in states[1..3].iter().zip([x2, x3]) {
        for (a, b) in s.as_array().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn zero_gains_give_drift_powers() {
    let problem = baseline();
    for eps in [0.0, 0.3, 1.0] {
        let states = rollout_expected(&problem, &GainSchedule::zeros(problem.horizon), eps).unwrap();
        let mut x = problem.x_ini.to_vector();
        for s in &states {
            assert_eq!(s.to_vector(), x);
            x = problem.plant.a_tilde * x;
        }
    }
}

#[test]
fn full_loss_differs_by_accumulated_control() {
    let problem = baseline();
    let gains = schedule(&fixture_gains(problem.horizon));
    let with = rollout_expected(&problem, &gains, 0.0).unwrap();
    let without = rollout_expected(&problem, &gains, 1.0).unwrap();
    // x0_t - x1_t = sum_j A~^(t-1-j) B~ K_j x0_j
    let a = problem.plant.a_tilde;
    let mut acc = Vector3::zeros();
    for t in 1..problem.horizon {
        let u = (gains.gains[t - 1] * with[t - 1].to_vector())[0];
        acc = a * acc + problem.plant.b_tilde * u;
        let diff = with[t].to_vector() - without[t].to_vector();
        assert!((diff - acc).abs().max() <= 1e-9 * (1.0 + acc.abs().max()));
    }
}

#[test]
fn unconstrained_inner_matches_riccati() {
    let problem = baseline();
    let opts = SolverOptions {
        enforce_stability: false,
        ..SolverOptions::default()
    };
    for eps in [0.0, 0.1, 0.5] {
        let out = solve_inner(&problem, eps, &opts, None).unwrap();
        let want = riccati_optimum(&problem, eps);
        assert!(rel(out.cost_j, want) < 1e-6, "eps {eps}: {} vs {want}", out.cost_j);
    }
}

#[test]
fn time_invariant_mode_is_never_better() {
    let problem = baseline();
    let tv = solve_inner(&problem, 0.01, &SolverOptions::default(), None).unwrap();
    let ti_opts = SolverOptions {
        gain_mode: GainMode::TimeInvariant,
        ..SolverOptions::default()
    };
    let ti = solve_inner(&problem, 0.01, &ti_opts, None).unwrap();
    assert!(ti.gains.gains.windows(2).all(|w| w[0] == w[1]));
    assert!(tv.cost_j <= ti.cost_j * (1.0 + 1e-6));
}

#[test]
fn penalty_rounds_are_monotone() {
    let problem = baseline();
    let opts = SolverOptions {
        keep_trace: true,
        ..SolverOptions::default()
    };
    let out = solve_inner(&problem, 0.05, &opts, None).unwrap();
    assert_eq!(out.trace.len(), opts.penalty_rounds);
    for round in &out.trace {
        assert!(round.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn gradient_of_cost_matches_differences() {
    let problem = baseline();
    let gains = schedule(&fixture_gains(problem.horizon));
    let (j, g) = cost_gradient(&problem, &gains, 0.2).unwrap();
    assert!(rel(j, expected_cost(&problem, &gains, 0.2).unwrap()) < 1e-12);
    assert_eq!(g.len(), problem.horizon);
    // the last gain never acts inside the horizon
    assert_eq!(g[problem.horizon - 1], Gain::zeros());
    assert!(gradient_check(&problem, &gains, 0.2, 0.0).unwrap() < 1e-4);
    assert!(gradient_check(&problem, &gains, 0.2, 1e5).unwrap() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_check_on_random_problems(
        varsigma in 0.05f64..1.0,
        t_d in 0.01f64..0.1,
        x in prop::array::uniform3(-50.0f64..50.0),
        k in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 10),
        eps in 0.0f64..0.9,
        sigma in 0.0f64..3.0,
        mu in prop::sample::select(vec![0.0, 1e2, 1e4]),
    ) {
        let mut problem = baseline();
        problem.plant = build_plant(varsigma, t_d).unwrap();
        problem.weights = StabilityWeights::riccati_default(&problem.plant, 0.01).unwrap();
        problem.sensing.sigma = sigma;
        problem.x_ini = StateVector::from(x);
        let err = gradient_check(&problem, &schedule(&k), eps, mu).unwrap();
        prop_assert!(err < 1e-4, "relative error {}", err);
    }
}

#[test]
fn evaluate_constraints_generous_budget_is_slack() {
    let problem = baseline_problem(10, 100e6, 0.15).unwrap();
    let gains = lqr_schedule(&problem);
    let mut cand = candidate(&problem, gains, 50e6, 50e6, 1e-3, 1e-3);
    let r = evaluate_constraints(&problem, &cand).unwrap();
    assert!(!r.link_infeasible);
    assert!(r.max_violation() <= 0.0, "{r:?}");
    assert_eq!(r.bandwidth, 0.0);
    cand.w_u = 30e6;
    let r = evaluate_constraints(&problem, &cand).unwrap();
    assert!((r.bandwidth + 0.2).abs() < 1e-15);
}

#[test]
fn zero_bandwidth_is_flagged() {
    let problem = baseline();
    let cand = candidate(&problem, lqr_schedule(&problem), 0.0, 1.5e6, 1e-3, 1e-3);
    let r = evaluate_constraints(&problem, &cand).unwrap();
    assert!(r.link_infeasible);
    assert!(!r.is_feasible(1e-6));
    assert!(residuals_finite(&r));
}

fn residuals_finite(r: &agv_codesign::codesign::Residuals) -> bool {
    [r.capacity_uplink, r.capacity_downlink, r.cycle_time, r.stability, r.bandwidth, r.loss_box]
        .iter()
        .all(|v| v.is_finite())
}

fn candidate(
    problem: &CodesignProblem,
    gains: GainSchedule,
    w_u: f64,
    w_d: f64,
    eps_u: f64,
    eps_d: f64,
) -> CodesignSolution {
    let mut c = CodesignSolution {
        gains,
        w_u,
        w_d,
        eps_u,
        eps_d,
        derived: Default::default(),
        cost_j: 0.0,
        residuals: Default::default(),
        status: SolveStatus::Converged,
        diagnostics: Default::default(),
    };
    c.residuals = evaluate_constraints(problem, &c).unwrap();
    c
}

#[test]
fn baseline_solve_is_feasible_and_reproducible() {
    let problem = baseline();
    let opts = SolverOptions::default();
    let sol = solve(&problem, &opts, Execution::Parallel).unwrap();
    assert_eq!(sol.status, SolveStatus::Converged);
    assert!(sol.residuals.is_feasible(opts.feas_tol), "{:?}", sol.residuals);
    assert!(sol.w_u + sol.w_d <= problem.w_0 * (1.0 + 1e-12));
    assert_eq!(evaluate_constraints(&problem, &sol).unwrap(), sol.residuals);
    let again = solve(&problem, &opts, Execution::Serial).unwrap();
    assert_eq!(sol, again);
}

#[test]
fn resources_nonbinding_match_lossless_inner_optimum() {
    // huge budget and noiseless sensing: the communication side should cost
    // nothing beyond the eps floor
    let mut problem = baseline_problem(10, 1e9, 10.0).unwrap();
    problem.sensing.sigma = 0.0;
    let opts = SolverOptions::default();
    let sol = solve(&problem, &opts, Execution::Parallel).unwrap();
    assert_eq!(sol.status, SolveStatus::Converged);
    let ideal = solve_inner(&problem, 0.0, &opts, None).unwrap();
    assert!(rel(sol.cost_j, ideal.cost_j) < 0.01, "{} vs {}", sol.cost_j, ideal.cost_j);
}

#[test]
fn impossible_cycle_budget_is_infeasible() {
    let problem = baseline_problem(10, 1.5e6, 1e-6).unwrap();
    let sol = solve(&problem, &SolverOptions::default(), Execution::Parallel).unwrap();
    assert_eq!(sol.status, SolveStatus::Infeasible);
    assert!(sol.residuals.cycle_time > 0.0);
}

#[test]
fn cost_does_not_increase_with_budget() {
    let opts = SolverOptions::default();
    let costs: Vec<f64> = [0.5e6, 1.5e6, 5e6]
        .iter()
        .map(|&w| {
            let sol = solve(&baseline_problem(10, w, 0.001).unwrap(), &opts, Execution::Parallel).unwrap();
            assert_ne!(sol.status, SolveStatus::Infeasible);
            sol.cost_j
        })
        .collect();
    for w in costs.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-3), "{costs:?}");
    }
}

#[test]
fn solver_options_reject_bad_values() {
    let bad = SolverOptions {
        eps_min: 0.0,
        ..SolverOptions::default()
    };
    assert!(bad.validate().is_err());
    let bad = SolverOptions {
        penalty_rounds: 0,
        ..SolverOptions::default()
    };
    assert!(bad.validate().is_err());
}
