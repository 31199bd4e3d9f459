//! AGV longitudinal dynamics and the stochastic Lyapunov stability test.
//!
//! Continuous model `x' = A x + B u` with engine lag `varsigma`, discretized by
//! forward Euler with step `T_d`: `A~ = T_d A + I`, `B~ = T_d B`. The control is
//! scalar, `u = K x` with a 1x3 gain row.

use nalgebra::{Matrix3, RowVector3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimation::StateVector;

/// 1x3 state-feedback gain.
pub type Gain = RowVector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantModel {
    /// Engine time constant, seconds.
    pub varsigma: f64,
    /// Discretization step, seconds.
    pub t_d: f64,
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    pub a_tilde: Matrix3<f64>,
    pub b_tilde: Vector3<f64>,
}

/// Builds the continuous and Euler-discretized matrices.
pub fn build_plant(varsigma: f64, t_d: f64) -> Result<PlantModel> {
    if varsigma == 0.0 {
        return Err(Error::SingularEngine);
    }
    if !varsigma.is_finite() {
        return Err(invalid("varsigma", "must be finite"));
    }
    if !(t_d > 0.0 && t_d.is_finite()) {
        return Err(invalid("T_d", format!("must be > 0, got {t_d}")));
    }
    let lag = -1.0 / varsigma;
    #[rustfmt::skip]
    let a = Matrix3::new(
        0.0, 1.0, 0.0,
        0.0, 0.0, 1.0,
        0.0, 0.0, lag,
    );
    let b = Vector3::new(0.0, 0.0, lag);
    Ok(PlantModel {
        varsigma,
        t_d,
        a,
        b,
        a_tilde: a * t_d + Matrix3::identity(),
        b_tilde: b * t_d,
    })
}

impl PlantModel {
    /// Drift `A~ x`.
    pub fn drift(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.a_tilde * x
    }
}

/// Expected one-step prediction `A~ x + (1 - eps_c) B~ K x`.
pub fn step_expected(p: &PlantModel, x: StateVector, k: &Gain, eps_c: f64) -> StateVector {
    let xv = x.to_vector();
    let u = (k * xv)[0];
    StateVector::from_vector(&(p.a_tilde * xv + p.b_tilde * ((1.0 - eps_c) * u)))
}

/// Realized step: the command is computed from the estimate, the dynamics
/// evolve from the true state, and a lost package applies no control.
pub fn step_stochastic(p: &PlantModel, x_true: StateVector, x_hat: StateVector, k: &Gain, eta: bool) -> StateVector {
    let xv = x_true.to_vector();
    if !eta {
        return StateVector::from_vector(&(p.a_tilde * xv));
    }
    let u = (k * x_hat.to_vector())[0];
    apply_command(p, x_true, u)
}

/// `A~ x + B~ u` for an already computed command.
pub fn apply_command(p: &PlantModel, x: StateVector, u: f64) -> StateVector {
    StateVector::from_vector(&(p.a_tilde * x.to_vector() + p.b_tilde * (1.0 * u)))
}

/// Horizon-long sequence of gains `K_1..K_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSchedule {
    pub gains: Vec<Gain>,
}

impl GainSchedule {
    pub fn constant(k: Gain, horizon: usize) -> Self {
        Self {
            gains: vec![k; horizon],
        }
    }

    pub fn zeros(horizon: usize) -> Self {
        Self::constant(Gain::zeros(), horizon)
    }

    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    pub fn is_finite(&self) -> bool {
        self.gains.iter().all(|k| k.iter().all(|v| v.is_finite()))
    }
}

/// Lyapunov/state weight `P`, control weight `R_w` and terminal weight `S`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityWeights {
    pub p: Matrix3<f64>,
    pub r_w: f64,
    pub s: Matrix3<f64>,
}

impl StabilityWeights {
    pub fn validate(&self) -> Result<()> {
        check_psd("P", &self.p)?;
        check_psd("S", &self.s)?;
        if !(self.r_w >= 0.0 && self.r_w.is_finite()) {
            return Err(invalid("R_w", format!("must be >= 0, got {}", self.r_w)));
        }
        Ok(())
    }

    /// `P = S =` stabilizing solution of the discrete algebraic Riccati
    /// equation for unit state weight and control weight `r_w`.
    ///
    /// A diagonal `P` cannot certify any braking step from a pure position
    /// offset (the drift leaves `x^T P x` unchanged and every command only adds
    /// to it), so the Lyapunov weight has to carry the position/acceleration
    /// coupling that the Riccati solution provides.
    pub fn riccati_default(plant: &PlantModel, r_w: f64) -> Result<Self> {
        let p = solve_dare(plant, &Matrix3::identity(), r_w.max(1e-9))?;
        Ok(Self { p, r_w, s: p })
    }

    pub fn identity(r_w: f64) -> Self {
        Self {
            p: Matrix3::identity(),
            r_w,
            s: Matrix3::identity(),
        }
    }
}

/// Smallest eigenvalue of the symmetric part, after checking symmetry.
pub fn check_psd(name: &'static str, m: &Matrix3<f64>) -> Result<()> {
    let scale = m.abs().max().max(1.0);
    if !m.iter().all(|v| v.is_finite()) || (m - m.transpose()).abs().max() > 1e-9 * scale {
        return Err(Error::NotPositiveSemidefinite {
            name,
            min_eigenvalue: f64::NAN,
        });
    }
    let min = SymmetricEigen::new(*m).eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(Error::NotPositiveSemidefinite {
            name,
            min_eigenvalue: min,
        });
    }
    Ok(())
}

/// Fixed-point iteration of the discrete Riccati map
/// `P <- Q + A'PA - A'Pb (r + b'Pb)^-1 b'PA`.
pub fn solve_dare(plant: &PlantModel, q: &Matrix3<f64>, r: f64) -> Result<Matrix3<f64>> {
    let a = plant.a_tilde;
    let b = plant.b_tilde;
    let mut p = *q;
    for _ in 0..200_000 {
        let pb = p * b;
        let denom = r + b.dot(&pb);
        let apb = a.transpose() * pb;
        let next = q + a.transpose() * p * a - apb * apb.transpose() / denom;
        let next = (next + next.transpose()) * 0.5;
        let diff = (next - p).abs().max();
        p = next;
        if diff <= 1e-13 * p.abs().max().max(1.0) {
            return Ok(p);
        }
    }
    Err(invalid("P", "Riccati iteration did not converge"))
}

/// Infinite-horizon LQR gain for weights `(q, r)`, as a row with `u = K x`.
pub fn lqr_gain(plant: &PlantModel, p: &Matrix3<f64>, r: f64) -> Gain {
    let b = plant.b_tilde;
    let pb = p * b;
    let denom = r + b.dot(&pb);
    -(pb.transpose() * plant.a_tilde) / denom
}

/// Terms of the stability inequality `(1 - eps_c) F1 <= F2`.
///
/// `F1 = (A~x + B~Kx)' P (A~x + B~Kx) + Tr[(B~K)' P (B~K)] sigma^2/k_s - (A~x)' P (A~x)`,
/// `F2 = x' P x - (A~x)' P (A~x)`.
pub fn lyapunov_terms(
    p: &PlantModel,
    lyap: &Matrix3<f64>,
    x: StateVector,
    k: &Gain,
    sigma: f64,
    k_s: u32,
) -> Result<(f64, f64)> {
    check_psd("P", lyap)?;
    if k_s == 0 {
        return Err(invalid("k_s", "must be >= 1"));
    }
    Ok(lyapunov_terms_unchecked(p, lyap, x, k, sigma * sigma / f64::from(k_s)))
}

/// [`lyapunov_terms`] without the precondition checks, taking the fused
/// estimation variance `sigma^2 / k_s` directly.
pub fn lyapunov_terms_unchecked(
    p: &PlantModel,
    lyap: &Matrix3<f64>,
    x: StateVector,
    k: &Gain,
    noise_var: f64,
) -> (f64, f64) {
    let xv = x.to_vector();
    let drift = p.a_tilde * xv;
    let bk = p.b_tilde * k;
    let closed = drift + bk * xv;
    let drift_energy = drift.dot(&(lyap * drift));
    let f1 = closed.dot(&(lyap * closed)) + (bk.transpose() * lyap * bk).trace() * noise_var - drift_energy;
    let f2 = xv.dot(&(lyap * xv)) - drift_energy;
    (f1, f2)
}

/// Outcome of the stability test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityCheck {
    pub holds: bool,
    /// `(1 - eps_c) F1 - F2`; nonpositive when the inequality holds exactly.
    pub residual: f64,
}

/// Tests `(1 - eps_c) F1 <= F2` with tolerance `1e-9 (1 + |F2|)`.
pub fn stability_holds(f1: f64, f2: f64, eps_c: f64) -> StabilityCheck {
    let residual = (1.0 - eps_c) * f1 - f2;
    StabilityCheck {
        holds: residual <= 1e-9 * (1.0 + f2.abs()),
        residual,
    }
}

/// `E[x_+\' P x_+] - x\' P x` for `x_+ = A~ x + eta B~ K (x + n)`, with
/// `eta ~ Bernoulli(1 - eps_c)` and `n ~ N(0, noise_var I)`.
///
/// Expanded term by term in the scalar command `u = K x`, which gives a route
/// to the drift that does not go through [`lyapunov_terms`].
pub fn expected_lyapunov_drift(
    p: &PlantModel,
    lyap: &Matrix3<f64>,
    x: StateVector,
    k: &Gain,
    noise_var: f64,
    eps_c: f64,
) -> f64 {
    let xv = x.to_vector();
    let drift = p.a_tilde * xv;
    let b = p.b_tilde;
    let u = (k * xv)[0];
    let bpb = b.dot(&(lyap * b));
    let cross = 2.0 * u * b.dot(&(lyap * drift));
    let command_energy = bpb * (u * u + noise_var * k.norm_squared());
    drift.dot(&(lyap * drift)) + (1.0 - eps_c) * (cross + command_energy) - xv.dot(&(lyap * xv))
}

/// Quadratic Lyapunov function `x' P x`.
pub fn lyapunov_value(lyap: &Matrix3<f64>, x: StateVector) -> f64 {
    let xv = x.to_vector();
    xv.dot(&(lyap * xv))
}
