//! Subframe-level LTE uplink simulator: traffic models, channel draws,
//! grant bookkeeping, HARQ, buffer-status reporting and scheduler
//! comparison on top of the `ulsched-core` allocation and estimation
//! primitives.

pub mod channel;
pub mod config;
pub mod engine;
pub mod grants;
pub mod metrics;
pub mod schedulers;
pub mod traffic;

pub use config::{SchedulerKind, SimConfig, TrafficClass};
pub use engine::{run, run_with_seed, SimResult};
pub use metrics::{percentile, PacketRecord, SummaryRow};
