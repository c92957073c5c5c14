//! Delay-aware uplink resource allocation for OFDMA cells.
//!
//! The crate models single-carrier uplinks under fractional power control
//! and provides the solver stack for subframe-granular schedulers:
//!
//! - [`channel_power`]: achievable-rate curves `h(b)`, their
//!   subdifferentials, and inverses.
//! - [`reward`]: per-user reward functions of served rate (delay-weighted
//!   byte rewards, smoothed best-effort utilities, queue-drain rewards).
//! - [`flat_alloc`]: bandwidth allocation over one flat band by dual
//!   bisection with per-user packet-count/bandwidth bisections.
//! - [`delay_estimator`]: base-station-side reconstruction of UE queue and
//!   per-packet delay from scheduling records and buffer status reports.
//! - [`multiband`]: the frequency-selective extension solved with a
//!   structured log-barrier interior-point method.
//!
//! Unit conventions, used everywhere without further comment: bandwidth in
//! Hz, rates in bits/s, power in W, spectral densities in W/Hz, packet
//! sizes in bytes, delays and subframe lengths in ms. Delay-weighted
//! rewards are in byte·ms; the conversion "bytes served in one subframe
//! per bit/s of rate" is `subframe_ms * 1e-3 / 8`.

pub mod channel_power;
pub mod delay_estimator;
pub mod flat_alloc;
pub mod multiband;
pub mod reward;

/// Errors shared by the solver stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid link parameter {name} = {value}")]
    InvalidLink { name: &'static str, value: f64 },
    #[error("negative bandwidth {0}")]
    NegativeBandwidth(f64),
    #[error("negative rate {0}")]
    NegativeRate(f64),
    #[error("rate {rate} not achievable within bandwidth ceiling {ceiling}")]
    UnachievableRate { rate: f64, ceiling: f64 },
    #[error("invalid packet: {0}")]
    InvalidPacket(String),
    #[error("packet index {index} out of range 1..={len}")]
    PacketIndex { index: usize, len: usize },
    #[error("invalid parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("empty problem: no user has positive demand")]
    EmptyProblem,
    #[error("non-finite dual value {0}")]
    NonFiniteDual(f64),
    #[error("infeasible problem: {0}")]
    Infeasible(String),
    #[error("solver failure: {0}")]
    SolverFailure(String),
    #[error("trace parse error at line {line}: {msg}")]
    TraceParse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn require_finite(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::InvalidParameter { name, value })
    }
}
