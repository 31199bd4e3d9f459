//! Property checks run by `validate` on a configured problem.

use agv_codesign::codesign::{gradient_check, solve_inner, CodesignProblem, SolverOptions};
use agv_codesign::phy::{q_function, q_inverse};
use agv_codesign::plant::{check_psd, expected_lyapunov_drift, lqr_gain, lyapunov_terms_unchecked, lyapunov_value, Gain, GainSchedule};
use agv_codesign::qos::{downlink_arrival_rate, effective_capacity, max_delay, uplink_arrival_rate};
use agv_codesign::rng::seeded;
use agv_codesign::StateVector;
use rand::Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Pass,
    Fail,
    /// Not run because an earlier check left the problem unusable.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub outcome: Outcome,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn check(name: &'static str, ok: bool, detail: String) -> Check {
    Check {
        name,
        outcome: if ok { Outcome::Pass } else { Outcome::Fail },
        detail,
    }
}

fn rel(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(f64::MIN_POSITIVE)
}

fn psd(problem: &CodesignProblem) -> Check {
    let res = check_psd("P", &problem.weights.p).and_then(|_| check_psd("S", &problem.weights.s));
    match res {
        Ok(()) => check("weights_psd", true, "P and S are symmetric positive semidefinite".into()),
        Err(e) => check("weights_psd", false, e.to_string()),
    }
}

fn q_round_trip() -> Check {
    let mut worst: f64 = 0.0;
    let n = 400;
    for i in 0..=n {
        // log-spaced from 1e-6 to 0.499
        let p = 10f64.powf(-6.0 + (0.499f64.log10() + 6.0) * i as f64 / n as f64);
        match q_inverse(p) {
            Ok(x) => worst = worst.max(rel(q_function(x), p, p)),
            Err(_) => worst = f64::INFINITY,
        }
    }
    check("q_inverse_round_trip", worst <= 1e-9, format!("max relative error {worst:.3e} (limit 1e-9)"))
}

fn delay_round_trip(problem: &CodesignProblem) -> Check {
    let mut worst: f64 = 0.0;
    for link in [problem.link_u, problem.link_d] {
        let l = link.with_bandwidth(problem.w_0 / 2.0);
        let c = match effective_capacity(&l, problem.rate_mode, &problem.snr_model_u) {
            Ok(c) => c,
            Err(e) => return check("delay_bound_round_trip", false, format!("capacity at W_0/2: {e}")),
        };
        for i in 0..=60 {
            let eps = 10f64.powf(-6.0 + (0.4f64.log10() + 6.0) * i as f64 / 60.0);
            let d = max_delay(eps, l.theta, c).unwrap_or(f64::NAN);
            worst = worst.max(rel((-l.theta * c * d).exp(), eps, eps));
        }
    }
    check(
        "delay_bound_round_trip",
        worst <= 1e-12,
        format!("exp(-theta C D_max) vs eps, max relative error {worst:.3e} (limit 1e-12)"),
    )
}

fn departure_continuity(problem: &CodesignProblem) -> Check {
    let link_u = problem.link_u.with_bandwidth(problem.w_0 / 2.0);
    let lambda_u = uplink_arrival_rate(&problem.traffic);
    let tu = link_u.theta;
    let at = |td: f64| {
        downlink_arrival_rate(&problem.traffic, tu, td, &link_u, lambda_u, problem.rate_mode, &problem.snr_model_u)
    };
    let branch = if problem.link_d.theta > tu {
        "theta_d > theta_u"
    } else if problem.link_d.theta == tu {
        "theta_d = theta_u (branch boundary)"
    } else {
        "theta_d < theta_u"
    };
    match (at(tu), at(tu * (1.0 + 1e-9)), at(tu * (1.0 - 1e-9))) {
        (Ok(mid), Ok(up), Ok(down)) => {
            let err = rel(up, mid, mid.abs()).max(rel(down, mid, mid.abs()));
            check(
                "departure_rate_continuity",
                err <= 1e-6,
                format!("configured {branch}; jump across theta_d = theta_u is {err:.3e} relative (limit 1e-6)"),
            )
        }
        (a, b, c) => check(
            "departure_rate_continuity",
            false,
            format!("downlink arrival rate failed: {:?}", [a, b, c].iter().find_map(|r| r.clone().err())),
        ),
    }
}

fn stability_identity(problem: &CodesignProblem) -> Check {
    let mut rng = seeded(0x5eed);
    let noise = problem.noise_var();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let x = StateVector::new(
            rng.random_range(-100.0..100.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-5.0..5.0),
        );
        let k = Gain::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let eps = rng.random_range(0.0..1.0);
        let (f1, f2) = lyapunov_terms_unchecked(&problem.plant, &problem.weights.p, x, &k, noise);
        let direct = expected_lyapunov_drift(&problem.plant, &problem.weights.p, x, &k, noise, eps);
        let scale = lyapunov_value(&problem.weights.p, x).abs() + direct.abs() + 1.0;
        worst = worst.max(rel((1.0 - eps) * f1 - f2, direct, scale));
    }
    check(
        "stability_identity",
        worst <= 1e-9,
        format!("(1 - eps_c) F1 - F2 vs expanded E[dV], 200 draws, max relative error {worst:.3e} (limit 1e-9)"),
    )
}

fn gradient(problem: &CodesignProblem, opts: &SolverOptions) -> Check {
    let k0 = lqr_gain(&problem.plant, &problem.weights.p, problem.weights.r_w.max(1e-9));
    let mut rng = seeded(0x9ad);
    let gains = GainSchedule {
        gains: (0..problem.horizon)
            .map(|_| k0 + Gain::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)))
            .collect(),
    };
    let mu = opts.penalty_init * opts.penalty_growth.powi(opts.penalty_rounds as i32 - 1);
    match gradient_check(problem, &gains, 0.05, mu) {
        Ok(err) => check(
            "gradient_check",
            err <= 1e-4,
            format!("analytic vs central differences, max relative error {err:.3e} (limit 1e-4)"),
        ),
        Err(e) => check("gradient_check", false, e.to_string()),
    }
}

fn unconstrained_optimum(problem: &CodesignProblem, opts: &SolverOptions) -> Check {
    let eps = 0.05;
    let o = SolverOptions {
        enforce_stability: false,
        ..opts.clone()
    };
    let a = problem.plant.a_tilde;
    let b = problem.plant.b_tilde * (1.0 - eps);
    let r = problem.weights.r_w;
    let mut pi = problem.weights.s;
    for _ in 0..problem.horizon - 1 {
        let pb = pi * b;
        let apb = a.transpose() * pb;
        pi = problem.weights.p + a.transpose() * pi * a - apb * apb.transpose() / (r + b.dot(&pb));
    }
    let want = lyapunov_value(&pi, problem.x_ini);
    match solve_inner(problem, eps, &o, None) {
        Ok(out) => {
            let err = rel(out.cost_j, want, want.abs());
            check(
                "unconstrained_riccati",
                err <= 1e-6,
                format!("inner optimum {:.9e} vs backward Riccati {want:.9e}, relative gap {err:.3e} (limit 1e-6)", out.cost_j),
            )
        }
        Err(e) => check("unconstrained_riccati", false, e.to_string()),
    }
}

/// Runs every check; model checks are skipped when the problem is invalid.
pub fn run_checks(problem: &CodesignProblem, opts: &SolverOptions) -> Report {
    let mut checks = vec![psd(problem)];
    let valid = match problem.validate().and_then(|_| opts.validate()) {
        Ok(()) => {
            checks.push(check("parameters_valid", true, "all parameters within their domains".into()));
            true
        }
        Err(e) => {
            checks.push(check("parameters_valid", false, e.to_string()));
            false
        }
    };
    checks.push(q_round_trip());
    let model: [(&'static str, fn(&CodesignProblem, &SolverOptions) -> Check); 5] = [
        ("delay_bound_round_trip", |p, _| delay_round_trip(p)),
        ("departure_rate_continuity", |p, _| departure_continuity(p)),
        ("stability_identity", |p, _| stability_identity(p)),
        ("gradient_check", gradient),
        ("unconstrained_riccati", unconstrained_optimum),
    ];
    for (name, f) in model {
        checks.push(if valid {
            f(problem, opts)
        } else {
            Check {
                name,
                outcome: Outcome::Skip,
                detail: "skipped: problem parameters are invalid".into(),
            }
        });
    }
    Report {
        passed: checks.iter().all(|c| c.outcome != Outcome::Fail),
        checks,
    }
}
