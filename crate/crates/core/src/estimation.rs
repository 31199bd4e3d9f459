//! Multi-sensor state estimation.
//!
//! Each of the `k_s` sensors observes the full state with i.i.d. zero-mean
//! Gaussian noise of standard deviation `sigma` on every component. The
//! maximum-likelihood estimate under that model is the component-wise mean,
//! whose mean-square error per component is `sigma^2 / k_s`.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// AGV state: position (m), velocity (m/s) and acceleration (m/s^2).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVector {
    pub delta: f64,
    pub v: f64,
    pub a: f64,
}

impl StateVector {
    pub const ZERO: StateVector = StateVector {
        delta: 0.0,
        v: 0.0,
        a: 0.0,
    };

    pub fn new(delta: f64, v: f64, a: f64) -> Self {
        Self { delta, v, a }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.delta, self.v, self.a)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.delta.is_finite() && self.v.is_finite() && self.a.is_finite()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.delta, self.v, self.a]
    }
}

impl From<[f64; 3]> for StateVector {
    fn from(x: [f64; 3]) -> Self {
        Self::new(x[0], x[1], x[2])
    }
}

impl From<Vector3<f64>> for StateVector {
    fn from(v: Vector3<f64>) -> Self {
        Self::from_vector(&v)
    }
}

/// Sensing parameters of one control loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingConfig {
    /// Sensors (observations) per loop.
    pub k_s: u32,
    /// Per-sensor noise standard deviation, in state units.
    pub sigma: f64,
    /// Sensing period in seconds.
    pub t_s: f64,
    /// Bits per sensing package.
    pub beta: f64,
}

impl SensingConfig {
    pub fn new(k_s: u32, sigma: f64, t_s: f64, beta: f64) -> Result<Self> {
        let cfg = Self {
            k_s,
            sigma,
            t_s,
            beta,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_s < 1 {
            return Err(invalid("k_s", "at least one sensor is required"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid("sigma", format!("must be finite and >= 0, got {}", self.sigma)));
        }
        if !(self.t_s > 0.0 && self.t_s.is_finite()) {
            return Err(invalid("T_s", format!("must be > 0, got {}", self.t_s)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(invalid("beta", format!("must be > 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// The `k_s` observations of one loop, optionally with the ground truth they
/// were drawn around. The truth is kept for audits only; [`fuse`] never reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub observations: Vec<StateVector>,
    pub truth: Option<StateVector>,
}

/// Draws `cfg.k_s` observations `truth + N(0, sigma^2 I)`.
pub fn sample_observations<R: Rng + ?Sized>(
    truth: StateVector,
    cfg: &SensingConfig,
    rng: &mut R,
) -> ObservationSet {
    let observations = (0..cfg.k_s)
        .map(|_| {
            let n: [f64; 3] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            StateVector::new(
                truth.delta + cfg.sigma * n[0],
                truth.v + cfg.sigma * n[1],
                truth.a + cfg.sigma * n[2],
            )
        })
        .collect();
    ObservationSet {
        observations,
        truth: Some(truth),
    }
}

/// Component-wise arithmetic mean of the observations.
///
/// Accumulated as deviations from the first observation, so identical
/// observations fuse to exactly that value.
pub fn fuse(obs: &ObservationSet) -> Result<StateVector> {
    let first = obs.observations.first().ok_or(Error::EmptyObservations)?.to_vector();
    let n = obs.observations.len() as f64;
    let dev = obs
        .observations
        .iter()
        .fold(Vector3::zeros(), |acc, o| acc + (o.to_vector() - first));
    Ok(StateVector::from_vector(&(first + dev / n)))
}

/// Per-component mean-square error of the fused estimate, `sigma^2 / k_s`.
pub fn estimation_mse(cfg: &SensingConfig) -> f64 {
    cfg.sigma * cfg.sigma / f64::from(cfg.k_s)
}
