//! Baseline braking scenario: an AGV at rest 100 m before its stop point.
//!
//! These are the default parameter values used by the CLI and the test
//! suites. The sensor count `k_s`, bandwidth budget and cycle-time budget are
//! experiment inputs and have no baseline.

use crate::codesign::CodesignProblem;
use crate::error::Result;
use crate::estimation::{SensingConfig, StateVector};
use crate::phy::{LinkConfig, RateMode};
use crate::plant::{build_plant, StabilityWeights};
use crate::qos::{SnrModel, TrafficModel};

pub const SIGMA: f64 = 1.5;
pub const BETA_BITS: f64 = 1000.0;
pub const GAMMA_BITS: f64 = 20.0;
pub const SNR_U: f64 = 20.0;
pub const SNR_D: f64 = 30.0;
pub const E_U: f64 = 0.001;
pub const E_D: f64 = 0.002;
pub const BLOCKLENGTH: u32 = 200;
pub const T_D: f64 = 0.05;
pub const T_S: f64 = 0.05;
pub const THETA_U: f64 = 0.001;
pub const THETA_D: f64 = 0.002;
pub const VARSIGMA: f64 = 0.125;
/// Commands per loop and optimization horizon (one shared value).
pub const N: u32 = 10;
pub const X_INI: [f64; 3] = [100.0, 0.0, 0.0];
pub const R_W: f64 = 0.01;

/// Baseline problem for `k_s` sensors, bandwidth budget `w_0` (Hz) and
/// cycle-time budget `d_0` (s), with Riccati-derived `P = S`.
pub fn baseline_problem(k_s: u32, w_0: f64, d_0: f64) -> Result<CodesignProblem> {
    let plant = build_plant(VARSIGMA, T_D)?;
    let weights = StabilityWeights::riccati_default(&plant, R_W)?;
    let problem = CodesignProblem {
        plant,
        weights,
        traffic: TrafficModel {
            beta: BETA_BITS,
            gamma: GAMMA_BITS,
            k_s,
            t_s: T_S,
            n_cmd: N,
        },
        sensing: SensingConfig::new(k_s, SIGMA, T_S, BETA_BITS)?,
        link_u: LinkConfig::new(1.0, SNR_U, BLOCKLENGTH, E_U, THETA_U)?,
        link_d: LinkConfig::new(1.0, SNR_D, BLOCKLENGTH, E_D, THETA_D)?,
        w_0,
        d_0,
        x_ini: StateVector::from(X_INI),
        horizon: N as usize,
        rate_mode: RateMode::Normalized,
        snr_model_u: SnrModel::Deterministic,
        snr_model_d: SnrModel::Deterministic,
    };
    problem.validate()?;
    Ok(problem)
}

