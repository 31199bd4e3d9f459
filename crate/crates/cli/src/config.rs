//! TOML configuration, resolved against the baseline defaults.
//!
//! Keys mirror the model symbols (`beta`, `k_s`, `T_s`, `varsigma`, ...).
//! With `defaults = "baseline"` (the default) every symbol except `k_s` falls
//! back to the baseline scenario; with `defaults = "none"` every symbol must
//! be given.

use agv_codesign::codesign::{CodesignProblem, SolverOptions};
use agv_codesign::estimation::{SensingConfig, StateVector};
use agv_codesign::phy::{LinkConfig, RateMode, SnrUnit};
use agv_codesign::plant::{build_plant, solve_dare, PlantModel, StabilityWeights};
use agv_codesign::qos::{SnrModel, TrafficModel};
use agv_codesign::scenario;
use agv_codesign::simloop::SimConfig;
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Defaults {
    #[default]
    Baseline,
    None,
}

/// A 3x3 weight given by name or by rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Named(String),
    Rows([[f64; 3]; 3]),
}

impl MatrixSpec {
    fn resolve(&self, key: &'static str, plant: &PlantModel, r_w: f64) -> Result<Matrix3<f64>, CliError> {
        match self {
            MatrixSpec::Named(n) if n == "riccati" => {
                solve_dare(plant, &Matrix3::identity(), r_w.max(1e-9)).map_err(CliError::from)
            }
            MatrixSpec::Named(n) if n == "identity" => Ok(Matrix3::identity()),
            MatrixSpec::Named(n) => Err(CliError::Validation(format!(
                "weights.{key}: unknown matrix name `{n}` (expected \"riccati\", \"identity\" or a 3x3 array)"
            ))),
            MatrixSpec::Rows(r) => Ok(Matrix3::from_fn(|i, j| r[i][j])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    #[serde(rename = "R_w")]
    pub r_w: Option<f64>,
    #[serde(rename = "P")]
    pub p: Option<MatrixSpec>,
    /// Defaults to `P`.
    #[serde(rename = "S")]
    pub s: Option<MatrixSpec>,
}

/// The configuration file as written; every field optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub defaults: Option<Defaults>,
    pub k_s: Option<u32>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    #[serde(rename = "T_s")]
    pub t_s: Option<f64>,
    #[serde(rename = "T_d")]
    pub t_d: Option<f64>,
    pub sigma: Option<f64>,
    pub snr_u: Option<f64>,
    pub snr_d: Option<f64>,
    pub snr_unit: Option<SnrUnit>,
    pub e_u: Option<f64>,
    pub e_d: Option<f64>,
    pub theta_u: Option<f64>,
    pub theta_d: Option<f64>,
    pub varsigma: Option<f64>,
    #[serde(rename = "N")]
    pub n: Option<u32>,
    #[serde(rename = "L")]
    pub l: Option<u32>,
    #[serde(rename = "W_0_hz", alias = "W_0")]
    pub w_0_hz: Option<f64>,
    #[serde(rename = "D_0_s", alias = "D_0")]
    pub d_0_s: Option<f64>,
    #[serde(rename = "X_ini")]
    pub x_ini: Option<[f64; 3]>,
    pub rate_mode: Option<RateMode>,
    pub seed: Option<u64>,
    pub weights: Option<WeightsFile>,
    pub solver: Option<SolverOptions>,
    pub sim: Option<SimConfig>,
}

/// Resolved weight specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSpec {
    #[serde(rename = "R_w")]
    pub r_w: f64,
    #[serde(rename = "P")]
    pub p: MatrixSpec,
    #[serde(rename = "S")]
    pub s: MatrixSpec,
}

/// Every model parameter with its final value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedParams {
    pub k_s: u32,
    pub beta: f64,
    pub gamma: f64,
    #[serde(rename = "T_s")]
    pub t_s: f64,
    #[serde(rename = "T_d")]
    pub t_d: f64,
    pub sigma: f64,
    pub snr_u: f64,
    pub snr_d: f64,
    pub snr_unit: SnrUnit,
    pub e_u: f64,
    pub e_d: f64,
    pub theta_u: f64,
    pub theta_d: f64,
    pub varsigma: f64,
    #[serde(rename = "N")]
    pub n: u32,
    #[serde(rename = "L")]
    pub l: u32,
    #[serde(rename = "W_0_hz")]
    pub w_0_hz: f64,
    #[serde(rename = "D_0_s")]
    pub d_0_s: f64,
    #[serde(rename = "X_ini")]
    pub x_ini: [f64; 3],
    pub rate_mode: RateMode,
    pub weights: WeightsSpec,
}

/// Parameters plus solver and simulation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub params: ResolvedParams,
    pub solver: SolverOptions,
    pub sim: SimConfig,
}

// Takes the file's value or the baseline one; without defaults the key is
// recorded as missing and a placeholder keeps resolution going.
macro_rules! pick {
    ($file:expr, $base:expr, $missing:expr, $field:ident, $key:literal) => {
        match ($file.$field, $base) {
            (Some(v), _) => v,
            (None, true) => default_of!($field),
            (None, false) => {
                $missing.push($key);
                default_of!($field)
            }
        }
    };
}

macro_rules! default_of {
    (beta) => {
        scenario::BETA_BITS
    };
    (gamma) => {
        scenario::GAMMA_BITS
    };
    (t_s) => {
        scenario::T_S
    };
    (t_d) => {
        scenario::T_D
    };
    (sigma) => {
        scenario::SIGMA
    };
    (snr_u) => {
        scenario::SNR_U
    };
    (snr_d) => {
        scenario::SNR_D
    };
    (snr_unit) => {
        SnrUnit::Linear
    };
    (e_u) => {
        scenario::E_U
    };
    (e_d) => {
        scenario::E_D
    };
    (theta_u) => {
        scenario::THETA_U
    };
    (theta_d) => {
        scenario::THETA_D
    };
    (varsigma) => {
        scenario::VARSIGMA
    };
    (n) => {
        scenario::N
    };
    (l) => {
        scenario::BLOCKLENGTH
    };
    (w_0_hz) => {
        BASELINE_W_0_HZ
    };
    (d_0_s) => {
        BASELINE_D_0_S
    };
    (x_ini) => {
        scenario::X_INI
    };
    (rate_mode) => {
        RateMode::Normalized
    };
}

/// Bandwidth budget of the baseline experiment, Hz.
pub const BASELINE_W_0_HZ: f64 = 1.5e6;
/// Cycle-time budget of the baseline experiment, seconds.
pub const BASELINE_D_0_S: f64 = 0.15;

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {}", e.to_string().trim_end())))
    }

    pub fn resolve(self) -> Result<ResolvedConfig, CliError> {
        let base = self.defaults.unwrap_or_default() == Defaults::Baseline;
        let mut missing: Vec<&str> = Vec::new();
        let k_s = self.k_s.unwrap_or_else(|| {
            missing.push("k_s");
            1
        });
        let w = self.weights.clone().unwrap_or_default();
        let r_w = w.r_w.unwrap_or_else(|| {
            if !base {
                missing.push("weights.R_w");
            }
            scenario::R_W
        });
        let p = w.p.unwrap_or_else(|| {
            if !base {
                missing.push("weights.P");
            }
            MatrixSpec::Named("riccati".into())
        });
        let weights = WeightsSpec {
            r_w,
            s: w.s.unwrap_or_else(|| p.clone()),
            p,
        };
        let params = ResolvedParams {
            k_s,
            beta: pick!(self, base, missing, beta, "beta"),
            gamma: pick!(self, base, missing, gamma, "gamma"),
            t_s: pick!(self, base, missing, t_s, "T_s"),
            t_d: pick!(self, base, missing, t_d, "T_d"),
            sigma: pick!(self, base, missing, sigma, "sigma"),
            snr_u: pick!(self, base, missing, snr_u, "snr_u"),
            snr_d: pick!(self, base, missing, snr_d, "snr_d"),
            snr_unit: pick!(self, base, missing, snr_unit, "snr_unit"),
            e_u: pick!(self, base, missing, e_u, "e_u"),
            e_d: pick!(self, base, missing, e_d, "e_d"),
            theta_u: pick!(self, base, missing, theta_u, "theta_u"),
            theta_d: pick!(self, base, missing, theta_d, "theta_d"),
            varsigma: pick!(self, base, missing, varsigma, "varsigma"),
            n: pick!(self, base, missing, n, "N"),
            l: pick!(self, base, missing, l, "L"),
            w_0_hz: pick!(self, base, missing, w_0_hz, "W_0_hz"),
            d_0_s: pick!(self, base, missing, d_0_s, "D_0_s"),
            x_ini: pick!(self, base, missing, x_ini, "X_ini"),
            rate_mode: pick!(self, base, missing, rate_mode, "rate_mode"),
            weights,
        };
        if !missing.is_empty() {
            let names: Vec<String> = missing.iter().map(|m| format!("`{m}`")).collect();
            let hint = if missing.contains(&"k_s") { " (k_s has no baseline value)" } else { "" };
            return Err(CliError::Validation(format!(
                "missing required parameter{} {}{hint}",
                if missing.len() > 1 { "s" } else { "" },
                names.join(", ")
            )));
        }
        let mut sim = self.sim.unwrap_or_default();
        if let Some(seed) = self.seed {
            sim.seed = seed;
        }
        Ok(ResolvedConfig {
            params,
            solver: self.solver.unwrap_or_default(),
            sim,
        })
    }
}

impl ResolvedParams {
    /// Builds the problem without checking its invariants, so that
    /// `validate` can report on broken configurations.
    pub fn build_unchecked(&self) -> Result<CodesignProblem, CliError> {
        let plant = build_plant(self.varsigma, self.t_d)?;
        let weights = StabilityWeights {
            p: self.weights.p.resolve("P", &plant, self.weights.r_w)?,
            r_w: self.weights.r_w,
            s: self.weights.s.resolve("S", &plant, self.weights.r_w)?,
        };
        let snr_u = self.snr_unit.to_linear(self.snr_u);
        let snr_d = self.snr_unit.to_linear(self.snr_d);
        Ok(CodesignProblem {
            plant,
            weights,
            traffic: TrafficModel {
                beta: self.beta,
                gamma: self.gamma,
                k_s: self.k_s,
                t_s: self.t_s,
                n_cmd: self.n,
            },
            sensing: SensingConfig {
                k_s: self.k_s,
                sigma: self.sigma,
                t_s: self.t_s,
                beta: self.beta,
            },
            link_u: LinkConfig {
                bandwidth: 1.0,
                snr: snr_u,
                blocklength: self.l,
                decoding_error: self.e_u,
                theta: self.theta_u,
            },
            link_d: LinkConfig {
                bandwidth: 1.0,
                snr: snr_d,
                blocklength: self.l,
                decoding_error: self.e_d,
                theta: self.theta_d,
            },
            w_0: self.w_0_hz,
            d_0: self.d_0_s,
            x_ini: StateVector::from(self.x_ini),
            horizon: self.n as usize,
            rate_mode: self.rate_mode,
            snr_model_u: SnrModel::Deterministic,
            snr_model_d: SnrModel::Deterministic,
        })
    }

    /// Builds and validates the problem.
    pub fn build(&self) -> Result<CodesignProblem, CliError> {
        let problem = self.build_unchecked()?;
        problem.validate()?;
        Ok(problem)
    }
}
