//! Joint sensing, communication and control model of a wireless closed-loop
//! AGV braking system.
//!
//! The crate is organised bottom-up:
//!
//! * [`estimation`] fuses `k_s` noisy sensor observations into a state estimate.
//! * [`phy`] computes finite-blocklength service rates.
//! * [`qos`] turns rates into effective capacities, delay bounds and loss
//!   probabilities for the uplink/downlink tandem queue.
//! * [`plant`] holds the discretized AGV dynamics and the Lyapunov stability test.
//! * [`codesign`] jointly chooses bandwidth split, loss targets and gains.
//! * [`simloop`] replays a co-design solution under sensing noise, random
//!   delay and packet loss, and aggregates Monte Carlo statistics.

pub mod codesign;
pub mod error;
pub mod estimation;
pub mod exec;
pub mod phy;
pub mod plant;
pub mod qos;
pub mod rng;
pub mod scenario;
pub mod simloop;

pub use error::{Error, Result};
pub use estimation::StateVector;

/// Version string embedded in every artifact the crate writes.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
