//! Gain-schedule optimization for fixed resources.
//!
//! Minimizes `J(K) + w * sum_t max(0, g_t)^2`, where `g_t` is the Lyapunov
//! residual `(1 - eps_c) F1 - F2` at rollout step `t` and
//! `w = mu / (1 + X_ini' P X_ini)`. Gradients come from the adjoint of the
//! linear rollout. Each penalty round runs monotone descent along
//! limited-memory quasi-Newton directions with Armijo backtracking, then `mu`
//! grows.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{check_horizon, CodesignProblem, GainMode, SolverOptions};
use crate::error::{invalid, Result};
use crate::plant::{lqr_gain, lyapunov_value, solve_dare, Gain, GainSchedule, PlantModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerOutcome {
    pub gains: GainSchedule,
    pub cost_j: f64,
    /// Unweighted `sum_t max(0, g_t)^2` at the returned gains.
    pub violation: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Accepted objective values per penalty round (only with `keep_trace`).
    pub trace: Vec<Vec<f64>>,
}

struct Evaluator {
    a: Matrix3<f64>,
    b: Vector3<f64>,
    p: Matrix3<f64>,
    s: Matrix3<f64>,
    h: Matrix3<f64>,
    r: f64,
    c: f64,
    noise: f64,
    bpb: f64,
    x0: Vector3<f64>,
    n: usize,
    /// Penalty weight including the normalization.
    w: f64,
}

struct Value {
    cost: f64,
    violation: f64,
    total: f64,
}

impl Evaluator {
    fn new(problem: &CodesignProblem, eps_c: f64, mu: f64) -> Self {
        let PlantModel { a_tilde, b_tilde, .. } = problem.plant;
        let p = problem.weights.p;
        Self {
            a: a_tilde,
            b: b_tilde,
            p,
            s: problem.weights.s,
            h: a_tilde.transpose() * p * a_tilde,
            r: problem.weights.r_w,
            c: 1.0 - eps_c,
            noise: problem.noise_var(),
            bpb: b_tilde.dot(&(p * b_tilde)),
            x0: problem.x_ini.to_vector(),
            n: problem.horizon,
            w: mu / (1.0 + lyapunov_value(&p, problem.x_ini)),
        }
    }

    // g(x, k) = c [ (Mx)'P(Mx) - x'Hx + noise b'Pb |k|^2 ] - (x'Px - x'Hx)
    fn residual(&self, x: &Vector3<f64>, k: &Gain) -> f64 {
        let mx = self.a * x + self.b * (k * x)[0];
        let xhx = x.dot(&(self.h * x));
        self.c * (mx.dot(&(self.p * mx)) - xhx + self.noise * self.bpb * k.norm_squared()) - (x.dot(&(self.p * x)) - xhx)
    }

    fn residual_grad(&self, x: &Vector3<f64>, k: &Gain) -> (Vector3<f64>, Gain) {
        let mx = self.a * x + self.b * (k * x)[0];
        let pmx = self.p * mx;
        // M' v = A' v + k' (b' v)
        let mt_pmx = self.a.transpose() * pmx + k.transpose() * self.b.dot(&pmx);
        let hx = self.h * x;
        let gx = (mt_pmx - hx) * (2.0 * self.c) - (self.p * x - hx) * 2.0;
        let gk = (x.transpose() * (2.0 * self.b.dot(&pmx)) + k * (2.0 * self.noise * self.bpb)) * self.c;
        (gx, gk)
    }

    fn eval(&self, k: &[Gain], grad: Option<&mut [Gain]>) -> Value {
        let n = self.n;
        let mut xs = Vec::with_capacity(n);
        let mut us = Vec::with_capacity(n);
        let mut x = self.x0;
        let mut cost = 0.0;
        for (t, kt) in k.iter().enumerate() {
            xs.push(x);
            if t + 1 < n {
                let u = (kt * x)[0];
                cost += x.dot(&(self.p * x)) + self.r * u * u;
                us.push(u);
                x = self.a * x + self.b * (self.c * u);
            } else {
                cost += x.dot(&(self.s * x));
            }
        }
        let gs: Vec<f64> = if self.w > 0.0 {
            xs.iter().zip(k).map(|(x, kt)| self.residual(x, kt).max(0.0)).collect()
        } else {
            vec![0.0; n]
        };
        let violation: f64 = gs.iter().map(|g| g * g).sum();
        let total = cost + self.w * violation;

        if let Some(grad) = grad {
            let pen = |t: usize| -> Option<(Vector3<f64>, Gain)> {
                (gs[t] > 0.0).then(|| {
                    let (gx, gk) = self.residual_grad(&xs[t], &k[t]);
                    let f = 2.0 * self.w * gs[t];
                    (gx * f, gk * f)
                })
            };
            let last = n - 1;
            let mut lam = self.s * xs[last] * 2.0;
            grad[last] = Gain::zeros();
            if let Some((px, pk)) = pen(last) {
                lam += px;
                grad[last] += pk;
            }
            for t in (0..last).rev() {
                let (xt, ut, kt) = (xs[t], us[t], k[t]);
                let blam = self.b.dot(&lam);
                grad[t] = xt.transpose() * (2.0 * self.r * ut + self.c * blam);
                lam = self.p * xt * 2.0 + kt.transpose() * (2.0 * self.r * ut) + self.a.transpose() * lam + kt.transpose() * (self.c * blam);
                if let Some((px, pk)) = pen(t) {
                    lam += px;
                    grad[t] += pk;
                }
            }
        }
        Value { cost, violation, total }
    }
}

/// Free parameters of a gain mode: one gain per step, or one shared gain.
struct Params {
    mode: GainMode,
    n: usize,
}

impl Params {
    fn expand(&self, theta: &[Gain]) -> Vec<Gain> {
        match self.mode {
            GainMode::TimeVarying => theta.to_vec(),
            GainMode::TimeInvariant => vec![theta[0]; self.n],
        }
    }

    fn reduce(&self, full: &[Gain]) -> Vec<Gain> {
        match self.mode {
            GainMode::TimeVarying => full.to_vec(),
            GainMode::TimeInvariant => vec![full.iter().fold(Gain::zeros(), |acc, g| acc + g)],
        }
    }

    fn eval(&self, ev: &Evaluator, theta: &[Gain], want_grad: bool) -> (Value, Vec<Gain>) {
        let full = self.expand(theta);
        if want_grad {
            let mut g = vec![Gain::zeros(); self.n];
            let v = ev.eval(&full, Some(&mut g));
            (v, self.reduce(&g))
        } else {
            (ev.eval(&full, None), Vec::new())
        }
    }
}

fn dot(a: &[Gain], b: &[Gain]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn inf_norm(a: &[Gain]) -> f64 {
    a.iter().map(|g| g.amax()).fold(0.0, f64::max)
}

struct Descent {
    theta: Vec<Gain>,
    iterations: usize,
    converged: bool,
}

fn axpy(x: &[Gain], a: f64, d: &[Gain]) -> Vec<Gain> {
    x.iter().zip(d).map(|(x, d)| x + d * a).collect()
}

// Limited-memory quasi-Newton direction (two-loop recursion).
fn lbfgs_direction(g: &[Gain], mem: &VecDeque<(Vec<Gain>, Vec<Gain>, f64)>) -> Vec<Gain> {
    let mut q: Vec<Gain> = g.iter().map(|v| -v).collect();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * dot(s, &q);
        q = axpy(&q, -a, y);
        alphas.push(a);
    }
    if let Some((s, y, _)) = mem.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q = axpy(&q, a - b, s);
    }
    q
}

fn descend(ev: &Evaluator, params: &Params, theta0: Vec<Gain>, max_iters: usize, tol: f64, trace: &mut Option<Vec<f64>>) -> Descent {
    const ARMIJO: f64 = 1e-4;
    const MEMORY: usize = 10;
    const STALL_LIMIT: usize = 20;
    let mut theta = theta0;
    let (v, mut g) = params.eval(ev, &theta, true);
    let mut f = v.total;
    if let Some(t) = trace.as_mut() {
        t.push(f);
    }
    let mut mem: VecDeque<(Vec<Gain>, Vec<Gain>, f64)> = VecDeque::with_capacity(MEMORY);
    let mut stall = 0;
    for it in 0..max_iters {
        if !f.is_finite() {
            return Descent { theta, iterations: it, converged: false };
        }
        if inf_norm(&g) * (1.0 + inf_norm(&theta)) <= tol * (1.0 + f.abs()) {
            return Descent { theta, iterations: it, converged: true };
        }
        let mut dir = lbfgs_direction(&g, &mem);
        let mut slope = dot(&g, &dir);
        let mut step = 1.0;
        if !(slope < 0.0) {
            // curvature pairs went stale; restart from steepest descent
            mem.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        if mem.is_empty() {
            step = 1e-3 * (1.0 + inf_norm(&theta)) / inf_norm(&dir);
        }
        let accepted = loop {
            let trial = axpy(&theta, step, &dir);
            let (tv, _) = params.eval(ev, &trial, false);
            if tv.total.is_finite() && tv.total <= f + ARMIJO * step * slope {
                break Some((trial, tv.total));
            }
            step *= 0.5;
            if step * inf_norm(&dir) <= f64::EPSILON * (1.0 + inf_norm(&theta)) {
                break None;
            }
        };
        let Some((next, f_next)) = accepted else {
            if !mem.is_empty() {
                mem.clear();
                continue;
            }
            // no representable descent step is left
            return Descent { theta, iterations: it, converged: true };
        };
        let (_, g_next) = params.eval(ev, &next, true);
        let s: Vec<Gain> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<Gain> = g_next.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if mem.len() == MEMORY {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        stall = if f - f_next <= 1e-15 * (1.0 + f.abs()) { stall + 1 } else { 0 };
        theta = next;
        g = g_next;
        f = f_next;
        if let Some(t) = trace.as_mut() {
            t.push(f);
        }
        if stall >= STALL_LIMIT {
            return Descent { theta, iterations: it + 1, converged: true };
        }
    }
    Descent { theta, iterations: max_iters, converged: false }
}

/// Infinite-horizon LQ gain for the expected dynamics, used as a warm start.
fn lqr_start(problem: &CodesignProblem, eps_c: f64) -> Gain {
    let c = 1.0 - eps_c;
    if c <= 0.0 {
        return Gain::zeros();
    }
    let mut plant = problem.plant;
    plant.b_tilde *= c;
    let r = problem.weights.r_w.max(1e-9);
    let q = problem.weights.p + Matrix3::identity() * 1e-12;
    match solve_dare(&plant, &q, r) {
        Ok(p) => lqr_gain(&plant, &p, r),
        Err(_) => Gain::zeros(),
    }
}

/// Optimizes the gain schedule for a fixed closed-loop loss `eps_c`.
pub fn solve_inner(
    problem: &CodesignProblem,
    eps_c: f64,
    opts: &SolverOptions,
    warm: Option<&GainSchedule>,
) -> Result<InnerOutcome> {
    if !(0.0..=1.0).contains(&eps_c) {
        return Err(invalid("eps_c", format!("must lie in [0, 1], got {eps_c}")));
    }
    let n = problem.horizon;
    let params = Params { mode: opts.gain_mode, n };
    let start = match warm {
        Some(w) => {
            check_horizon(problem, w)?;
            w.gains.clone()
        }
        None => vec![lqr_start(problem, eps_c); n],
    };
    let mut theta = match opts.gain_mode {
        GainMode::TimeVarying => start,
        GainMode::TimeInvariant => vec![start[0]],
    };
    let rounds = if opts.enforce_stability { opts.penalty_rounds } else { 1 };
    let mut iterations = 0;
    let mut converged = true;
    let mut trace = Vec::new();
    for round in 0..rounds {
        let mu = if opts.enforce_stability {
            opts.penalty_init * opts.penalty_growth.powi(round as i32)
        } else {
            0.0
        };
        let ev = Evaluator::new(problem, eps_c, mu);
        let mut rt = opts.keep_trace.then(Vec::new);
        let d = descend(&ev, &params, theta, opts.inner_max_iters, opts.inner_tol, &mut rt);
        theta = d.theta;
        iterations += d.iterations;
        converged = d.converged;
        if let Some(rt) = rt {
            trace.push(rt);
        }
    }
    let gains = GainSchedule { gains: params.expand(&theta) };
    let v = Evaluator::new(problem, eps_c, 1.0).eval(&gains.gains, None);
    Ok(InnerOutcome {
        gains,
        cost_j: v.cost,
        violation: v.violation,
        iterations,
        converged,
        trace,
    })
}

/// `J` and `dJ/dK_t` at a gain schedule.
pub fn cost_gradient(problem: &CodesignProblem, gains: &GainSchedule, eps_c: f64) -> Result<(f64, Vec<Gain>)> {
    augmented_objective(problem, gains, eps_c, 0.0)
}

/// Penalized objective `J + w sum max(0, g_t)^2` and its gradient, with
/// `w = mu / (1 + X_ini' P X_ini)`.
pub fn augmented_objective(problem: &CodesignProblem, gains: &GainSchedule, eps_c: f64, mu: f64) -> Result<(f64, Vec<Gain>)> {
    check_horizon(problem, gains)?;
    let ev = Evaluator::new(problem, eps_c, mu);
    let mut g = vec![Gain::zeros(); problem.horizon];
    let v = ev.eval(&gains.gains, Some(&mut g));
    Ok((v.total, g))
}

/// Largest relative gap between the analytic gradient of the augmented
/// objective and central differences with step `1e-6 (1 + |K_ti|)`.
///
/// Each step's gradient row `dJ/dK_t` is compared as a vector, relative to
/// the larger of the two norms and floored at `1e-6` of the largest row norm.
/// `J` is quadratic in any single gain entry, so the differences carry no
/// truncation error; what remains is rounding of order `1e-16 |J| / h`, which
/// a per-entry comparison would charge to entries much smaller than that.
pub fn gradient_check(problem: &CodesignProblem, gains: &GainSchedule, eps_c: f64, mu: f64) -> Result<f64> {
    let (_, analytic) = augmented_objective(problem, gains, eps_c, mu)?;
    let ev = Evaluator::new(problem, eps_c, mu);
    let floor = 1e-6 * analytic.iter().map(|g| g.norm()).fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    let mut k = gains.gains.clone();
    for t in 0..k.len() {
        let mut numeric = Gain::zeros();
        for i in 0..3 {
            let orig = k[t][i];
            let h = 1e-6 * (1.0 + orig.abs());
            k[t][i] = orig + h;
            let up = ev.eval(&k, None).total;
            k[t][i] = orig - h;
            let down = ev.eval(&k, None).total;
            k[t][i] = orig;
            numeric[i] = (up - down) / (2.0 * h);
        }
        let a = analytic[t];
        let scale = a.norm().max(numeric.norm()).max(floor);
        if scale > 0.0 {
            worst = worst.max((a - numeric).norm() / scale);
        }
    }
    Ok(worst)
}
