//! Joint design of the bandwidth split, per-link loss targets and the gain
//! schedule.
//!
//! The objective is the quadratic cost of the expected rollout
//! `X_{t+1} = A~ X_t + (1 - eps_c) B~ K_t X_t` from `X_ini`. Constraints:
//!
//! * effective capacity covers the arrival rate on both links,
//! * the cycle-time bound stays within `D_0`,
//! * the stochastic Lyapunov decrease condition holds at every rollout step,
//! * `W_u + W_d <= W_0` and `0 <= eps_c <= 1`.
//!
//! [`solve`] is a two-level local search: a grid over the resources with a
//! coordinate-descent refinement outside, and penalized gradient descent on
//! the gains inside (see [`solve_inner`]).

mod inner;
mod outer;

use serde::{Deserialize, Serialize};

pub use inner::{augmented_objective, cost_gradient, gradient_check, solve_inner, InnerOutcome};
pub use outer::{best_split, solve};

use crate::error::{invalid, Error, Result};
use crate::estimation::{estimation_mse, SensingConfig, StateVector};
use crate::phy::{LinkConfig, RateMode};
use crate::plant::{lyapunov_terms_unchecked, lyapunov_value, step_expected, GainSchedule, PlantModel, StabilityWeights};
use crate::qos::{
    compose_loss, downlink_arrival_rate, effective_capacity, max_delay, uplink_arrival_rate, LoopQos, SnrModel,
    TrafficModel,
};

/// Finite stand-in for an unbounded residual, so that solutions stay
/// JSON-serializable.
pub const INFEASIBLE_SURROGATE: f64 = 1e30;

/// One instance of the co-design problem. The link templates carry every
/// physical parameter except the bandwidth, which is a decision variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodesignProblem {
    pub plant: PlantModel,
    pub weights: StabilityWeights,
    pub traffic: TrafficModel,
    pub sensing: SensingConfig,
    pub link_u: LinkConfig,
    pub link_d: LinkConfig,
    /// Total bandwidth budget, Hz.
    pub w_0: f64,
    /// Cycle-time budget, seconds.
    pub d_0: f64,
    pub x_ini: StateVector,
    /// Optimization horizon in steps; equals the commands shipped per loop.
    pub horizon: usize,
    pub rate_mode: RateMode,
    pub snr_model_u: SnrModel,
    pub snr_model_d: SnrModel,
}

impl CodesignProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_0 > 0.0 && self.w_0.is_finite()) {
            return Err(invalid("W_0", format!("must be > 0, got {}", self.w_0)));
        }
        if !(self.d_0 > 0.0 && self.d_0.is_finite()) {
            return Err(invalid("D_0", format!("must be > 0, got {}", self.d_0)));
        }
        if self.horizon < 1 {
            return Err(invalid("N", "horizon must be >= 1"));
        }
        if !self.x_ini.is_finite() {
            return Err(invalid("X_ini", "must be finite"));
        }
        if self.traffic.k_s != self.sensing.k_s {
            return Err(invalid("k_s", "traffic and sensing disagree on the sensor count"));
        }
        self.weights.validate()?;
        self.traffic.validate()?;
        self.sensing.validate()?;
        self.link_u.validate()?;
        self.link_d.validate()?;
        Ok(())
    }

    /// Copy with a different sensor count.
    pub fn with_k_s(&self, k_s: u32) -> Self {
        let mut p = self.clone();
        p.sensing.k_s = k_s;
        p.traffic.k_s = k_s;
        p
    }

    /// Fused-estimate variance `sigma^2 / k_s`.
    pub fn noise_var(&self) -> f64 {
        estimation_mse(&self.sensing)
    }

    fn links(&self, w_u: f64, w_d: f64) -> (LinkConfig, LinkConfig) {
        (self.link_u.with_bandwidth(w_u), self.link_d.with_bandwidth(w_d))
    }
}

/// Communication decision variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resources {
    pub w_u: f64,
    pub w_d: f64,
    pub eps_u: f64,
    pub eps_d: f64,
}

impl Resources {
    pub fn eps_c(&self) -> f64 {
        compose_loss(self.eps_u, self.eps_d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    Infeasible,
    IterationLimit,
}

/// Signed constraint residuals, normalized so that `<= 0` is satisfied and
/// the magnitude is relative to the constraint's own scale.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Residuals {
    /// `lambda_u / C_u - 1`.
    pub capacity_uplink: f64,
    /// `lambda_d / C_d - 1`.
    pub capacity_downlink: f64,
    /// `D_c_max / D_0 - 1`.
    pub cycle_time: f64,
    /// Worst `((1 - eps_c) F1 - F2) / (1 + x' P x)` over the rollout.
    pub stability: f64,
    /// 1-based rollout step attaining [`Residuals::stability`].
    pub stability_step: usize,
    /// `(W_u + W_d - W_0) / W_0`.
    pub bandwidth: f64,
    /// `max(-eps_c, eps_c - 1)`.
    pub loss_box: f64,
    /// A link rate was non-positive; the affected residuals hold
    /// [`INFEASIBLE_SURROGATE`].
    pub link_infeasible: bool,
}

impl Residuals {
    pub fn max_violation(&self) -> f64 {
        [
            self.capacity_uplink,
            self.capacity_downlink,
            self.cycle_time,
            self.stability,
            self.bandwidth,
            self.loss_box,
        ]
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        !self.link_infeasible && self.max_violation() <= tol
    }
}

/// Solver bookkeeping carried with a solution.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub inner_solves: usize,
    pub refine_iterations: usize,
    /// Largest relative deviation of the analytic gradient from central
    /// differences, when the check was requested.
    pub gradient_check: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodesignSolution {
    pub gains: GainSchedule,
    pub w_u: f64,
    pub w_d: f64,
    pub eps_u: f64,
    pub eps_d: f64,
    pub derived: LoopQos,
    pub cost_j: f64,
    pub residuals: Residuals,
    pub status: SolveStatus,
    pub diagnostics: Diagnostics,
}

impl CodesignSolution {
    pub fn resources(&self) -> Resources {
        Resources {
            w_u: self.w_u,
            w_d: self.w_d,
            eps_u: self.eps_u,
            eps_d: self.eps_d,
        }
    }
}

/// Whether each `K_t` is free or all steps share one gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainMode {
    #[default]
    TimeVarying,
    TimeInvariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Bandwidth-split levels of the coarse grid.
    pub grid_w: usize,
    /// Loss-target levels of the coarse grid, log-spaced.
    pub grid_eps: usize,
    pub eps_min: f64,
    pub eps_max: f64,
    /// Cap on coordinate-descent sweeps.
    pub refine_iters: usize,
    /// Refinement stops once the step in `log10(eps)` falls below this.
    pub refine_tol: f64,
    pub penalty_rounds: usize,
    pub penalty_growth: f64,
    pub penalty_init: f64,
    pub inner_max_iters: usize,
    pub inner_tol: f64,
    pub feas_tol: f64,
    pub gain_mode: GainMode,
    /// Impose the Lyapunov decrease condition; off gives the plain LQ problem.
    pub enforce_stability: bool,
    pub gradient_check: bool,
    /// Keep the accepted objective values of every penalty round.
    pub keep_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            grid_w: 16,
            grid_eps: 16,
            eps_min: 1e-6,
            eps_max: 0.5,
            refine_iters: 50,
            refine_tol: 1e-3,
            penalty_rounds: 4,
            penalty_growth: 10.0,
            penalty_init: 1e4,
            inner_max_iters: 5000,
            inner_tol: 1e-10,
            feas_tol: 1e-6,
            gain_mode: GainMode::TimeVarying,
            enforce_stability: true,
            gradient_check: false,
            keep_trace: false,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.grid_w < 1 || self.grid_eps < 1 {
            return Err(invalid("grid", "grid sizes must be >= 1"));
        }
        if !(self.eps_min > 0.0 && self.eps_min <= self.eps_max && self.eps_max < 1.0) {
            return Err(invalid("eps_min", "need 0 < eps_min <= eps_max < 1"));
        }
        if self.penalty_rounds < 1 || !(self.penalty_growth >= 1.0) || !(self.penalty_init > 0.0) {
            return Err(invalid("penalty", "need >= 1 round, growth >= 1 and a positive initial weight"));
        }
        if !(self.feas_tol >= 0.0) || !(self.inner_tol >= 0.0) || !(self.refine_tol > 0.0) {
            return Err(invalid("tolerance", "tolerances must be nonnegative"));
        }
        Ok(())
    }
}

/// Quadratic cost `sum_{t<N} (x_t' P x_t + R_w u_t^2) + x_N' S x_N`.
pub fn control_cost(states: &[StateVector], commands: &[f64], weights: &StabilityWeights) -> Result<f64> {
    let Some((last, head)) = states.split_last() else {
        return Err(Error::LengthMismatch("at least one state is required".into()));
    };
    if commands.len() != head.len() {
        return Err(Error::LengthMismatch(format!(
            "{} states need {} commands, got {}",
            states.len(),
            head.len(),
            commands.len()
        )));
    }
    let stage: f64 = head
        .iter()
        .zip(commands)
        .map(|(x, u)| lyapunov_value(&weights.p, *x) + weights.r_w * u * u)
        .sum();
    Ok(stage + lyapunov_value(&weights.s, *last))
}

fn check_horizon(problem: &CodesignProblem, gains: &GainSchedule) -> Result<()> {
    if gains.horizon() != problem.horizon {
        return Err(Error::LengthMismatch(format!(
            "gain schedule has {} steps, horizon is {}",
            gains.horizon(),
            problem.horizon
        )));
    }
    Ok(())
}

/// Expected states `X_1 = X_ini, .., X_N` under the gain schedule.
pub fn rollout_expected(problem: &CodesignProblem, gains: &GainSchedule, eps_c: f64) -> Result<Vec<StateVector>> {
    check_horizon(problem, gains)?;
    let mut states = Vec::with_capacity(problem.horizon);
    let mut x = problem.x_ini;
    states.push(x);
    for k in &gains.gains[..problem.horizon - 1] {
        x = step_expected(&problem.plant, x, k, eps_c);
        states.push(x);
    }
    Ok(states)
}

/// Commands `u_t = K_t X_t` for the first `N - 1` rollout states.
pub fn rollout_commands(states: &[StateVector], gains: &GainSchedule) -> Vec<f64> {
    states
        .iter()
        .zip(&gains.gains)
        .take(states.len().saturating_sub(1))
        .map(|(x, k)| (k * x.to_vector())[0])
        .collect()
}

/// Cost of the expected rollout.
pub fn expected_cost(problem: &CodesignProblem, gains: &GainSchedule, eps_c: f64) -> Result<f64> {
    let states = rollout_expected(problem, gains, eps_c)?;
    control_cost(&states, &rollout_commands(&states, gains), &problem.weights)
}

/// Link-level quantities of a resource choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommTerms {
    pub c_u: f64,
    pub c_d: f64,
    pub lambda_u: f64,
    pub lambda_d: f64,
    pub d_u_max: f64,
    pub d_d_max: f64,
    pub link_infeasible: bool,
}

impl CommTerms {
    pub fn loop_qos(&self, res: &Resources) -> LoopQos {
        LoopQos {
            d_c_max: finite_or_surrogate(self.d_u_max + self.d_d_max),
            eps_c: res.eps_c(),
        }
    }
}

fn finite_or_surrogate(v: f64) -> f64 {
    if v.is_finite() {
        v.min(INFEASIBLE_SURROGATE)
    } else {
        INFEASIBLE_SURROGATE
    }
}

/// Capacities, arrival rates and delay bounds. Rate failures are absorbed
/// into the `link_infeasible` flag.
pub fn comm_terms(problem: &CodesignProblem, res: &Resources) -> CommTerms {
    let lambda_u = uplink_arrival_rate(&problem.traffic);
    let mut link_infeasible = false;
    let usable = |w: f64| w > 0.0 && w.is_finite();
    let (c_u, c_d, lambda_d) = if usable(res.w_u) && usable(res.w_d) {
        let (lu, ld) = problem.links(res.w_u, res.w_d);
        let c_u = effective_capacity(&lu, problem.rate_mode, &problem.snr_model_u);
        let c_d = effective_capacity(&ld, problem.rate_mode, &problem.snr_model_d);
        let lambda_d = downlink_arrival_rate(
            &problem.traffic,
            lu.theta,
            ld.theta,
            &lu,
            lambda_u,
            problem.rate_mode,
            &problem.snr_model_u,
        );
        match (c_u, c_d, lambda_d) {
            (Ok(a), Ok(b), Ok(c)) => (a, b, c),
            _ => {
                link_infeasible = true;
                (0.0, 0.0, f64::INFINITY)
            }
        }
    } else {
        link_infeasible = true;
        (0.0, 0.0, f64::INFINITY)
    };
    let delay = |eps: f64, theta: f64, c: f64| max_delay(eps, theta, c).unwrap_or(f64::INFINITY);
    CommTerms {
        c_u,
        c_d,
        lambda_u,
        lambda_d,
        d_u_max: delay(res.eps_u, problem.link_u.theta, c_u),
        d_d_max: delay(res.eps_d, problem.link_d.theta, c_d),
        link_infeasible,
    }
}

/// Residuals of the constraints that involve only the resources.
pub(crate) fn comm_residuals(problem: &CodesignProblem, res: &Resources, terms: &CommTerms) -> [f64; 5] {
    let ratio = |lambda: f64, c: f64| {
        if c > 0.0 {
            finite_or_surrogate(lambda / c - 1.0)
        } else {
            INFEASIBLE_SURROGATE
        }
    };
    let eps_c = res.eps_c();
    [
        ratio(terms.lambda_u, terms.c_u),
        ratio(terms.lambda_d, terms.c_d),
        finite_or_surrogate((terms.d_u_max + terms.d_d_max) / problem.d_0 - 1.0),
        (res.w_u + res.w_d - problem.w_0) / problem.w_0,
        (-eps_c).max(eps_c - 1.0),
    ]
}

/// Worst normalized Lyapunov residual along the expected rollout and its
/// 1-based step.
pub fn stability_profile(problem: &CodesignProblem, gains: &GainSchedule, eps_c: f64) -> Result<(f64, usize)> {
    let states = rollout_expected(problem, gains, eps_c)?;
    let noise = problem.noise_var();
    let mut worst = (f64::NEG_INFINITY, 1);
    for (t, (x, k)) in states.iter().zip(&gains.gains).enumerate() {
        let (f1, f2) = lyapunov_terms_unchecked(&problem.plant, &problem.weights.p, *x, k, noise);
        let r = ((1.0 - eps_c) * f1 - f2) / (1.0 + lyapunov_value(&problem.weights.p, *x));
        if r > worst.0 || r.is_nan() {
            worst = (r, t + 1);
        }
    }
    Ok(worst)
}

/// Re-evaluates every constraint at the candidate's decision variables.
pub fn evaluate_constraints(problem: &CodesignProblem, candidate: &CodesignSolution) -> Result<Residuals> {
    let res = candidate.resources();
    let terms = comm_terms(problem, &res);
    let [capacity_uplink, capacity_downlink, cycle_time, bandwidth, loss_box] = comm_residuals(problem, &res, &terms);
    let (stability, stability_step) = stability_profile(problem, &candidate.gains, res.eps_c())?;
    Ok(Residuals {
        capacity_uplink,
        capacity_downlink,
        cycle_time,
        stability: finite_or_surrogate(stability),
        stability_step,
        bandwidth,
        loss_box,
        link_infeasible: terms.link_infeasible,
    })
}

