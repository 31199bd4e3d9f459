//! Physical layer: finite-blocklength service rate of a link.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::f64::consts::{LOG2_E, SQRT_2};

use crate::error::{invalid, Error, Result};

/// Complementary standard-normal CDF, `Q(x) = P(Z > x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

// Acklam's rational approximation of the lower-tail quantile; ~1e-9 relative.
fn acklam_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Inverse of [`q_function`]: returns `x` with `Q(x) = p`.
///
/// Acklam's approximation seeds two Newton steps against the erfc-based `Q`,
/// which brings the absolute error well below 1e-10 on `(1e-300, 1)`.
pub fn q_inverse(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain {
            context: "q_inverse",
            value: p,
        });
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Q(x) = p  <=>  Phi(-x) = p
    let mut x = -acklam_quantile(p);
    for _ in 0..2 {
        let pdf = normal_pdf(x);
        if pdf == 0.0 {
            break;
        }
        x += (q_function(x) - p) / pdf;
    }
    Ok(x)
}

/// Channel dispersion `V = 1 - 1/(1+snr)^2`.
pub fn channel_dispersion(snr: f64) -> f64 {
    1.0 - 1.0 / ((1.0 + snr) * (1.0 + snr))
}

/// Unit in which configured SNR values are expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnrUnit {
    #[default]
    Linear,
    #[serde(rename = "dB")]
    Db,
}

impl SnrUnit {
    pub fn to_linear(self, value: f64) -> f64 {
        match self {
            SnrUnit::Linear => value,
            SnrUnit::Db => 10f64.powf(value / 10.0),
        }
    }
}

/// How the finite-blocklength penalty is scaled against the Shannon term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMode {
    /// `W [log2(1+snr) - sqrt(V/L) Qinv(e) log2(e)]`: per-channel-use normal
    /// approximation scaled by bandwidth.
    #[default]
    Normalized,
    /// `W log2(1+snr) - sqrt(V/L) Qinv(e)`, the penalty left unscaled.
    PaperLiteral,
}

/// Physical and QoS parameters of one link direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    /// Bandwidth in Hz.
    pub bandwidth: f64,
    /// Linear signal-to-noise ratio.
    pub snr: f64,
    /// Blocklength in channel uses.
    pub blocklength: u32,
    /// Decoding error probability.
    pub decoding_error: f64,
    /// QoS exponent, 1/bit.
    pub theta: f64,
}

impl LinkConfig {
    pub fn new(bandwidth: f64, snr: f64, blocklength: u32, decoding_error: f64, theta: f64) -> Result<Self> {
        let link = Self {
            bandwidth,
            snr,
            blocklength,
            decoding_error,
            theta,
        };
        link.validate()?;
        Ok(link)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(invalid("W", format!("bandwidth must be > 0, got {}", self.bandwidth)));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(invalid("snr", format!("must be > 0, got {}", self.snr)));
        }
        if self.blocklength < 1 {
            return Err(invalid("L", "blocklength must be >= 1"));
        }
        if !(self.decoding_error > 0.0 && self.decoding_error < 0.5) {
            return Err(invalid("e", format!("decoding error must lie in (0, 0.5), got {}", self.decoding_error)));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(invalid("theta", format!("must be > 0, got {}", self.theta)));
        }
        Ok(())
    }

    pub fn with_bandwidth(mut self, bandwidth: f64) -> Self {
        self.bandwidth = bandwidth;
        self
    }

    pub fn with_snr(mut self, snr: f64) -> Self {
        self.snr = snr;
        self
    }
}

/// Finite-blocklength rate (bit/s) used as the queue service rate.
///
/// The decoding error is clamped to the open interval only by the link
/// invariants; rates that come out non-positive are reported as infeasible.
pub fn finite_blocklength_rate(link: &LinkConfig, mode: RateMode) -> Result<f64> {
    let shannon = (1.0 + link.snr).log2();
    let dispersion = channel_dispersion(link.snr);
    let penalty = (dispersion / f64::from(link.blocklength)).sqrt() * q_inverse(link.decoding_error)?;
    let rate = match mode {
        RateMode::Normalized => link.bandwidth * (shannon - penalty * LOG2_E),
        RateMode::PaperLiteral => link.bandwidth * shannon - penalty,
    };
    if rate > 0.0 {
        Ok(rate)
    } else {
        Err(Error::LinkInfeasible { rate })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // High-precision reference values (40-digit bisection on erfc).
    const QINV_1E_3: f64 = 3.090_232_306_167_813_5;
    const QINV_2E_3: f64 = 2.878_161_739_095_483_4;
    const QINV_1E_6: f64 = 4.753_424_308_822_898_9;
    const QINV_0_1: f64 = 1.281_551_565_544_600_5;
    const RATE_UP_1MHZ: f64 = 4_077_428.260_823_943;
    const RATE_UP_1MHZ_LITERAL: f64 = 4_392_317.204_514_225;

    fn uplink() -> LinkConfig {
        LinkConfig::new(1e6, 20.0, 200, 0.001, 0.001).unwrap()
    }

    #[test]
    fn q_inverse_reference_values() {
        assert_eq!(q_inverse(0.5).unwrap(), 0.0);
        for (p, x) in [(1e-3, QINV_1E_3), (2e-3, QINV_2E_3), (1e-6, QINV_1E_6), (0.1, QINV_0_1)] {
            let got = q_inverse(p).unwrap();
            assert!((got - x).abs() < 1e-10, "p={p}: {got} vs {x}");
        }
        assert!((q_inverse(0.001).unwrap() - 3.0902).abs() < 1e-4);
    }

    #[test]
    fn q_inverse_upper_half_is_antisymmetric() {
        for p in [0.6, 0.9, 0.999, 1.0 - 1e-6] {
            let a = q_inverse(p).unwrap();
            let b = q_inverse(1.0 - p).unwrap();
            assert!((a + b).abs() < 1e-9, "p={p}");
        }
    }

    #[test]
    fn q_inverse_domain_errors() {
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(q_inverse(p), Err(Error::Domain { .. })), "p={p}");
        }
    }

    #[test]
    fn q_round_trip_grid() {
        let mut p = 1e-6;
        while p < 0.499 {
            let x = q_inverse(p).unwrap();
            assert!((q_function(x) - p).abs() <= 1e-9 * p.max(1e-300) + 1e-15, "p={p}");
            p *= 1.1;
        }
    }

    #[test]
    fn dispersion_values() {
        assert!(channel_dispersion(1e-12) < 1e-11);
        assert!((channel_dispersion(20.0) - (1.0 - 1.0 / 441.0)).abs() < 1e-15);
        assert!((channel_dispersion(20.0) - 0.997_732).abs() < 1e-6);
        assert!(channel_dispersion(1e9) <= 1.0);
    }

    #[test]
    fn normalized_rate_reference() {
        let r = finite_blocklength_rate(&uplink(), RateMode::Normalized).unwrap();
        assert!((r - RATE_UP_1MHZ).abs() / RATE_UP_1MHZ < 1e-12, "{r}");
        assert!((r - 4.0774e6).abs() < 50.0);
        let lit = finite_blocklength_rate(&uplink(), RateMode::PaperLiteral).unwrap();
        assert!((lit - RATE_UP_1MHZ_LITERAL).abs() / RATE_UP_1MHZ_LITERAL < 1e-12);
    }

    #[test]
    fn penalty_vanishes_at_half_error_and_long_blocks() {
        let shannon = 1e6 * 21f64.log2();
        let mut link = uplink();
        link.decoding_error = 0.5 - 1e-15;
        for mode in [RateMode::Normalized, RateMode::PaperLiteral] {
            let r = finite_blocklength_rate(&link, mode).unwrap();
            assert!((r - shannon).abs() / shannon < 1e-9);
        }
        let gaps: Vec<f64> = [1_000u32, 100_000, 10_000_000, u32::MAX]
            .iter()
            .map(|&l| {
                let link = LinkConfig { blocklength: l, ..uplink() };
                (shannon - finite_blocklength_rate(&link, RateMode::Normalized).unwrap()) / shannon
            })
            .collect();
        assert!(gaps.windows(2).all(|w| w[1] < w[0] / 9.0), "{gaps:?}");
        assert!(gaps[3] < 2e-5);
    }

    #[test]
    fn infeasible_link_reported() {
        // One channel use at very low SNR cannot beat the dispersion penalty.
        let link = LinkConfig::new(1e3, 0.01, 1, 1e-6, 0.001).unwrap();
        assert!(matches!(
            finite_blocklength_rate(&link, RateMode::Normalized),
            Err(Error::LinkInfeasible { .. })
        ));
    }

    #[test]
    fn snr_units() {
        assert_eq!(SnrUnit::Linear.to_linear(20.0), 20.0);
        assert!((SnrUnit::Db.to_linear(20.0) - 100.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn q_inverse_strictly_decreasing(p in 1e-8f64..0.99, dp in 1e-6f64..0.009) {
            prop_assert!(q_inverse(p + dp).unwrap() < q_inverse(p).unwrap());
        }

        #[test]
        fn dispersion_increasing(s in 1e-6f64..1e4, ds in 1e-3f64..10.0) {
            prop_assert!(channel_dispersion(s + ds) > channel_dispersion(s));
            prop_assert!(channel_dispersion(s + ds) <= 1.0);
        }

        #[test]
        fn rate_monotone_in_each_parameter(
            w in 1e4f64..1e7, snr in 1.0f64..100.0, l in 10u32..1000, e in 1e-6f64..0.4,
            bump in 1.01f64..2.0, literal in any::<bool>(),
        ) {
            let mode = if literal { RateMode::PaperLiteral } else { RateMode::Normalized };
            let base = LinkConfig::new(w, snr, l, e, 1e-3).unwrap();
            let r0 = finite_blocklength_rate(&base, mode).unwrap();
            let variants = [
                base.with_bandwidth(w * bump),
                base.with_snr(snr * bump),
                LinkConfig { blocklength: ((l as f64) * bump).ceil() as u32, ..base },
                LinkConfig { decoding_error: (e * bump).min(0.49), ..base },
            ];
            for v in variants {
                prop_assert!(finite_blocklength_rate(&v, mode).unwrap() >= r0);
            }
        }

        #[test]
        fn modes_agree_when_penalty_is_zero(w in 1e3f64..1e7, snr in 0.1f64..1e3) {
            let link = LinkConfig { bandwidth: w, snr, blocklength: 100, decoding_error: 0.5, theta: 1.0 };
            let a = finite_blocklength_rate(&link, RateMode::Normalized).unwrap();
            let b = finite_blocklength_rate(&link, RateMode::PaperLiteral).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
