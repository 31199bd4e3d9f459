//! Link-layer QoS of the uplink/downlink tandem queue.
//!
//! Effective capacity `C(theta) = -(1/theta) ln E[exp(-theta R)]` bounds the
//! arrival rate a link can serve while its delay-violation probability decays
//! as `exp(-theta C D)`. From that tail the per-link delay bound is
//! `D_max = -ln(eps) / (theta C)`, and the loop composes the two links in series.
//!
//! Queue lengths are not simulated; the buffer-overflow exponent enters only
//! through `theta`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::phy::{finite_blocklength_rate, LinkConfig, RateMode};
use crate::rng::seeded;

/// Traffic offered to the tandem queue by one control loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficModel {
    /// Bits per sensing package.
    pub beta: f64,
    /// Bits per control package.
    pub gamma: f64,
    pub k_s: u32,
    /// Sensing period, seconds.
    pub t_s: f64,
    /// Control commands generated per loop.
    pub n_cmd: u32,
}

impl TrafficModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(invalid("beta", "must be > 0"));
        }
        if !(self.gamma >= 0.0) {
            return Err(invalid("gamma", "must be >= 0"));
        }
        if self.k_s == 0 {
            return Err(invalid("k_s", "must be >= 1"));
        }
        if !(self.t_s > 0.0) {
            return Err(invalid("T_s", "must be > 0"));
        }
        if self.n_cmd == 0 {
            return Err(invalid("N", "must be >= 1"));
        }
        Ok(())
    }

    /// Downlink bits generated per uplink bit, `N gamma / (beta k_s)`.
    pub fn command_ratio(&self) -> f64 {
        f64::from(self.n_cmd) * self.gamma / (self.beta * f64::from(self.k_s))
    }
}

/// Derived metrics of one queue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueQos {
    /// Effective capacity, bit/s.
    pub capacity: f64,
    /// Delay-violation (package loss) probability.
    pub eps: f64,
    /// Maximum delay, seconds.
    pub d_max: f64,
    pub theta: f64,
}

impl QueueQos {
    /// Builds the triple from `eps`, `theta` and `C`, deriving `D_max`.
    pub fn from_loss(eps: f64, theta: f64, capacity: f64) -> Result<Self> {
        Ok(Self {
            capacity,
            eps,
            d_max: max_delay(eps, theta, capacity)?,
            theta,
        })
    }
}

/// Closed-loop cycle-time bound and package loss probability.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LoopQos {
    pub d_c_max: f64,
    pub eps_c: f64,
}

/// Distribution of the instantaneous SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SnrDistribution {
    /// Finite support: `(snr, weight)` pairs, weights normalised internally.
    Discrete { points: Vec<(f64, f64)> },
    /// Log-normal shadowing, Gaussian in dB.
    LogNormalDb { mean_db: f64, sd_db: f64 },
}

impl SnrDistribution {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            SnrDistribution::Discrete { points } => {
                let total: f64 = points.iter().map(|p| p.1).sum();
                let mut u = rng.random::<f64>() * total;
                for &(snr, w) in points {
                    if u < w {
                        return snr;
                    }
                    u -= w;
                }
                points.last().map(|p| p.0).unwrap_or(f64::NAN)
            }
            SnrDistribution::LogNormalDb { mean_db, sd_db } => {
                let db = Normal::new(*mean_db, *sd_db)
                    .map(|n| n.sample(rng))
                    .unwrap_or(*mean_db);
                10f64.powf(db / 10.0)
            }
        }
    }
}

/// Model of the SNR over which the effective-capacity expectation is taken.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum SnrModel {
    /// SNR fixed at the link's configured value; `C` equals the rate.
    #[default]
    Deterministic,
    /// Monte Carlo expectation over `samples` draws with a fixed seed. The
    /// link's SNR field is ignored, and draws whose rate would be
    /// non-positive count as outages with zero rate.
    Sampled {
        distribution: SnrDistribution,
        samples: usize,
        seed: u64,
    },
}

/// Uplink arrival rate `beta k_s / T_s`.
pub fn uplink_arrival_rate(t: &TrafficModel) -> f64 {
    t.beta * f64::from(t.k_s) / t.t_s
}

/// Effective capacity of `link` at its own QoS exponent.
pub fn effective_capacity(link: &LinkConfig, mode: RateMode, snr_model: &SnrModel) -> Result<f64> {
    effective_capacity_at(link, link.theta, mode, snr_model)
}

/// Effective capacity at an arbitrary signed exponent.
///
/// A negative exponent is used by the tandem departure process and evaluates
/// the same formula, i.e. `(1/|theta|) ln E[exp(|theta| R)]`.
pub fn effective_capacity_at(
    link: &LinkConfig,
    theta: f64,
    mode: RateMode,
    snr_model: &SnrModel,
) -> Result<f64> {
    if theta == 0.0 || !theta.is_finite() {
        return Err(invalid("theta", "effective capacity needs a finite nonzero exponent"));
    }
    match snr_model {
        SnrModel::Deterministic => finite_blocklength_rate(link, mode),
        SnrModel::Sampled {
            distribution,
            samples,
            seed,
        } => {
            if *samples == 0 {
                return Err(invalid("samples", "need at least one SNR sample"));
            }
            let mut rng = seeded(*seed);
            // a fade below the decoding threshold is an outage: it serves nothing
            let rates = (0..*samples)
                .map(|_| match finite_blocklength_rate(&link.with_snr(distribution.sample(&mut rng)), mode) {
                    Err(Error::LinkInfeasible { .. }) => Ok(0.0),
                    r => r,
                })
                .collect::<Result<Vec<f64>>>()?;
            if rates.iter().all(|&r| r == 0.0) {
                return Err(Error::LinkInfeasible { rate: 0.0 });
            }
            Ok(-log_mean_exp(&rates, -theta) / theta)
        }
    }
}

// ln( mean_i exp(s * r_i) ), shifted by the extreme exponent and accumulated
// with expm1/ln_1p so that the theta -> 0 limit keeps full precision.
fn log_mean_exp(rates: &[f64], s: f64) -> f64 {
    let pivot = rates
        .iter()
        .map(|r| s * r)
        .fold(f64::NEG_INFINITY, f64::max);
    let n = rates.len() as f64;
    let mean_m1 = rates.iter().map(|r| (s * r - pivot).exp_m1()).sum::<f64>() / n;
    pivot + mean_m1.ln_1p()
}

/// Delay bound `-ln(eps) / (theta C)`.
pub fn max_delay(eps: f64, theta: f64, capacity: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain {
            context: "max_delay",
            value: eps,
        });
    }
    if !(theta > 0.0) {
        return Err(invalid("theta", "must be > 0"));
    }
    if !(capacity > 0.0) {
        return Err(invalid("C", "effective capacity must be > 0"));
    }
    Ok(-eps.ln() / (theta * capacity))
}

/// Delay-violation probability implied by a delay bound, `exp(-theta C D)`.
pub fn violation_probability(theta: f64, capacity: f64, delay: f64) -> f64 {
    (-theta * capacity * delay).exp()
}

/// Series composition of the uplink and downlink queues.
pub fn loop_metrics(up: &QueueQos, down: &QueueQos) -> LoopQos {
    LoopQos {
        d_c_max: up.d_max + down.d_max,
        eps_c: compose_loss(up.eps, down.eps),
    }
}

/// `1 - (1 - eps_u)(1 - eps_d)`.
pub fn compose_loss(eps_u: f64, eps_d: f64) -> f64 {
    eps_u + eps_d - eps_u * eps_d
}

/// Effective bandwidth of the uplink departure process seen by the downlink.
pub fn uplink_departure_rate(
    theta_u: f64,
    theta_d: f64,
    link_u: &LinkConfig,
    lambda_u: f64,
    mode: RateMode,
    snr_model: &SnrModel,
) -> Result<f64> {
    if !(theta_u > 0.0 && theta_d > 0.0) {
        return Err(invalid("theta", "QoS exponents must be > 0"));
    }
    if theta_d <= theta_u {
        return Ok(lambda_u);
    }
    let c_neg = effective_capacity_at(link_u, theta_u - theta_d, mode, snr_model)?;
    Ok(((theta_d - theta_u) * c_neg + lambda_u * theta_u) / theta_d)
}

/// Downlink arrival rate `(N gamma / (beta k_s)) L_u`.
pub fn downlink_arrival_rate(
    t: &TrafficModel,
    theta_u: f64,
    theta_d: f64,
    link_u: &LinkConfig,
    lambda_u: f64,
    mode: RateMode,
    snr_model: &SnrModel,
) -> Result<f64> {
    Ok(t.command_ratio() * uplink_departure_rate(theta_u, theta_d, link_u, lambda_u, mode, snr_model)?)
}

/// Capacity residuals `(C_u - lambda_u, C_d - lambda_d)`; both `>= 0` is feasible.
pub fn check_capacity_constraints(c_u: f64, c_d: f64, lambda_u: f64, lambda_d: f64) -> (f64, f64) {
    (c_u - lambda_u, c_d - lambda_d)
}
