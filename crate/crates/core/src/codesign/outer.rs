//! Resource search: a coarse grid, then coordinate descent on the loss targets.
//!
//! The gain subproblem depends on the resources only through `eps_c`, so
//! inner solutions are shared by every bandwidth split with the same loss
//! targets. Any bandwidth left unassigned could only shorten delays, so the
//! grid places every split on the budget edge `W_u + W_d = W_0`.

use std::collections::BTreeMap;

use super::{
    comm_residuals, comm_terms, evaluate_constraints, solve_inner, CodesignProblem, CodesignSolution, Diagnostics,
    InnerOutcome, Residuals, Resources, SolveStatus, SolverOptions,
};
use crate::error::Result;
use crate::exec::{map_indexed, Execution};

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

fn split(problem: &CodesignProblem, frac: f64, eps_u: f64, eps_d: f64) -> Resources {
    let w_u = frac * problem.w_0;
    Resources {
        w_u,
        w_d: problem.w_0 - w_u,
        eps_u,
        eps_d,
    }
}

fn comm_violation(problem: &CodesignProblem, res: &Resources) -> f64 {
    let r = comm_residuals(problem, res, &comm_terms(problem, res));
    r[0].max(r[1]).max(r[2])
}

/// Uplink share of `W_0` minimizing the worst of the capacity and cycle-time
/// residuals for the given loss targets (golden-section search).
pub fn best_split(problem: &CodesignProblem, eps_u: f64, eps_d: f64) -> f64 {
    let f = |frac: f64| comm_violation(problem, &split(problem, frac, eps_u, eps_d));
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (1e-6, 1.0 - 1e-6);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..80 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

fn assemble(problem: &CodesignProblem, res: Resources, inner: &InnerOutcome) -> Result<CodesignSolution> {
    let terms = comm_terms(problem, &res);
    let mut sol = CodesignSolution {
        gains: inner.gains.clone(),
        w_u: res.w_u,
        w_d: res.w_d,
        eps_u: res.eps_u,
        eps_d: res.eps_d,
        derived: terms.loop_qos(&res),
        cost_j: inner.cost_j,
        residuals: Residuals::default(),
        status: SolveStatus::Converged,
        diagnostics: Diagnostics::default(),
    };
    sol.residuals = evaluate_constraints(problem, &sol)?;
    Ok(sol)
}

struct Candidate {
    sol: CodesignSolution,
    inner_converged: bool,
}

/// `a` strictly preferred over `b`: lower cost, then smaller uplink bandwidth.
fn better(a: &CodesignSolution, b: &CodesignSolution) -> bool {
    a.cost_j < b.cost_j || (a.cost_j == b.cost_j && a.w_u < b.w_u)
}

/// Two-level local search for the co-design problem.
///
/// Infeasibility and iteration limits are reported through
/// [`CodesignSolution::status`]; errors are reserved for invalid input.
pub fn solve(problem: &CodesignProblem, opts: &SolverOptions, exec: Execution) -> Result<CodesignSolution> {
    problem.validate()?;
    opts.validate()?;
    let eps_levels = log_grid(opts.eps_min, opts.eps_max, opts.grid_eps);
    let fracs: Vec<f64> = (1..=opts.grid_w).map(|i| i as f64 / (opts.grid_w + 1) as f64).collect();

    // one inner solve per loss level, shared across splits
    let inner: Vec<InnerOutcome> = map_indexed(exec, eps_levels.len(), |j| {
        let e = eps_levels[j];
        solve_inner(problem, Resources { w_u: 0.0, w_d: 0.0, eps_u: e, eps_d: e }.eps_c(), opts, None)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut inner_solves = inner.len();

    let mut best: Option<Candidate> = None;
    let mut least_bad: Option<CodesignSolution> = None;
    for &frac in &fracs {
        for (j, &e) in eps_levels.iter().enumerate() {
            let sol = assemble(problem, split(problem, frac, e, e), &inner[j])?;
            if sol.residuals.is_feasible(opts.feas_tol) {
                if best.as_ref().is_none_or(|b| better(&sol, &b.sol)) {
                    best = Some(Candidate {
                        sol,
                        inner_converged: inner[j].converged,
                    });
                }
            } else if least_bad
                .as_ref()
                .is_none_or(|b| sol.residuals.max_violation() < b.residuals.max_violation())
            {
                least_bad = Some(sol);
            }
        }
    }

    let Some(mut current) = best else {
        let mut sol = least_bad.expect("grid is nonempty");
        sol.status = SolveStatus::Infeasible;
        sol.diagnostics.inner_solves = inner_solves;
        return Ok(sol);
    };

    // coordinate descent in (log10 eps_u, log10 eps_d); each probe re-splits
    // the bandwidth and warm-starts the gains from the incumbent
    let (lo, hi) = (opts.eps_min.log10(), opts.eps_max.log10());
    let mut h = if opts.grid_eps > 1 { (hi - lo) / (opts.grid_eps - 1) as f64 } else { 1.0 };
    let mut cache: BTreeMap<u64, InnerOutcome> = BTreeMap::new();
    let mut iterations = 0;
    let mut refined = false;
    while iterations < opts.refine_iters {
        if h < opts.refine_tol {
            refined = true;
            break;
        }
        iterations += 1;
        let (a, b) = (current.sol.eps_u.log10(), current.sol.eps_d.log10());
        let probes: Vec<(f64, f64)> = [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (1, 1), (-1, 1), (1, -1)]
            .iter()
            .map(|&(da, db)| {
                let pa = (a + f64::from(da) * h).clamp(lo, hi);
                let pb = (b + f64::from(db) * h).clamp(lo, hi);
                (10f64.powf(pa), 10f64.powf(pb))
            })
            .collect();
        let plans: Vec<Option<Resources>> = probes
            .iter()
            .map(|&(eu, ed)| {
                let res = split(problem, best_split(problem, eu, ed), eu, ed);
                (comm_violation(problem, &res) <= opts.feas_tol).then_some(res)
            })
            .collect();
        let warm = current.sol.gains.clone();
        let mut todo: Vec<f64> = Vec::new();
        for ec in plans.iter().flatten().map(Resources::eps_c) {
            if !cache.contains_key(&ec.to_bits()) && !todo.iter().any(|t| t.to_bits() == ec.to_bits()) {
                todo.push(ec);
            }
        }
        let solved = map_indexed(exec, todo.len(), |i| solve_inner(problem, todo[i], opts, Some(&warm)));
        inner_solves += solved.len();
        for (ec, out) in todo.iter().zip(solved) {
            cache.insert(ec.to_bits(), out?);
        }
        let mut moved = false;
        for res in plans.into_iter().flatten() {
            let out = &cache[&res.eps_c().to_bits()];
            let sol = assemble(problem, res, out)?;
            if sol.residuals.is_feasible(opts.feas_tol) && better(&sol, &current.sol) {
                current = Candidate {
                    sol,
                    inner_converged: out.converged,
                };
                moved = true;
            }
        }
        if !moved {
            h *= 0.5;
        }
    }
    if h < opts.refine_tol {
        refined = true;
    }

    let mut sol = current.sol;
    sol.status = if refined && current.inner_converged {
        SolveStatus::Converged
    } else {
        SolveStatus::IterationLimit
    };
    sol.diagnostics = Diagnostics {
        inner_solves,
        refine_iterations: iterations,
        gradient_check: None,
    };
    if opts.gradient_check {
        let mu = opts.penalty_init * opts.penalty_growth.powi(opts.penalty_rounds as i32 - 1);
        sol.diagnostics.gradient_check = Some(super::gradient_check(problem, &sol.gains, sol.derived.eps_c, mu)?);
    }
    Ok(sol)
}
