//! Simulation configuration. Every struct rejects unknown JSON keys so a
//! typo in a preset fails loudly instead of silently using a default.

use serde::{Deserialize, Serialize};

/// Resource-block width, Hz.
pub const RB_HZ: f64 = 180e3;
/// Subframe length, ms.
pub const SUBFRAME_MS: f64 = 1.0;
/// Grant-to-transmission pipeline delay, subframes.
pub const GRANT_DELAY: u64 = 4;
/// Transmission-to-decode delay, subframes.
pub const DECODE_DELAY: u64 = 4;
/// Retransmission period (synchronous HARQ), subframes.
pub const HARQ_PERIOD: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    /// Delay-weighted queue reward through the convex allocator.
    Hol,
    /// Queue-drain reward through the convex allocator.
    Queue,
    /// Greedy backlog-times-rate resource-block assignment.
    MaxWeight,
}

impl SchedulerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchedulerKind::Hol => "hol",
            SchedulerKind::Queue => "queue",
            SchedulerKind::MaxWeight => "max_weight",
        }
    }
}

impl std::str::FromStr for SchedulerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hol" => Ok(SchedulerKind::Hol),
            "queue" => Ok(SchedulerKind::Queue),
            "max_weight" | "maxweight" => Ok(SchedulerKind::MaxWeight),
            other => Err(format!(
                "unknown scheduler `{other}` (expected hol, queue or max_weight)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficClass {
    LiveVideo,
    Streaming,
}

impl TrafficClass {
    pub fn name(&self) -> &'static str {
        match self {
            TrafficClass::LiveVideo => "live_video",
            TrafficClass::Streaming => "streaming",
        }
    }
}

/// Cell pathloss and noise. Per-user pathloss is drawn uniformly from
/// the configured range, plus lognormal shadowing.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellConfig {
    pub n_rbs: usize,
    pub pathloss_min_db: f64,
    pub pathloss_max_db: f64,
    pub shadowing_sigma_db: f64,
    pub noise_dbm_hz: f64,
    pub interference_over_thermal_db: f64,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            n_rbs: 110,
            pathloss_min_db: 100.0,
            pathloss_max_db: 135.0,
            shadowing_sigma_db: 8.9,
            noise_dbm_hz: -174.0,
            interference_over_thermal_db: 6.0,
        }
    }
}

/// Fractional power control and the device power budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerConfig {
    /// Target received power baseline, dBm per resource block.
    pub p0_dbm_per_rb: f64,
    /// Fractional pathloss compensation exponent.
    pub alpha: f64,
    /// Device peak transmit power, W.
    pub peak_power_w: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            p0_dbm_per_rb: -60.0,
            alpha: 0.6,
            peak_power_w: 0.2,
        }
    }
}

/// Truncated Pareto parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParetoConfig {
    pub shape: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveVideoConfig {
    /// Source rate while ON, bit/s.
    pub on_rate_bps: f64,
    pub mean_on_ms: f64,
    pub mean_off_ms: f64,
    /// Packetization period while ON, ms.
    pub packet_period_ms: u64,
}

impl Default for LiveVideoConfig {
    fn default() -> Self {
        Self {
            on_rate_bps: 240e3,
            mean_on_ms: 2000.0,
            mean_off_ms: 2000.0,
            packet_period_ms: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamingConfig {
    pub frame_period_ms: u64,
    pub packets_per_frame: usize,
    /// Packet sizes, bytes.
    pub size: ParetoConfig,
    /// Scale factor applied to packet sizes (rate control).
    pub size_scale: f64,
    /// Intra-frame packet gaps, ms.
    pub gap_ms: ParetoConfig,
    /// Adaptive-rate mode: scale each user's packet sizes so its mean
    /// source rate is this fraction of the throughput it achieved in a
    /// full-buffer calibration run. Overrides `size_scale`.
    pub load_fraction: Option<f64>,
    /// Draw each user's mean source rate uniformly from this range,
    /// bit/s, decoupled from its channel. Overrides `size_scale`.
    pub mean_rate_range_bps: Option<(f64, f64)>,
}

impl Default for StreamingConfig {
    fn default() -> Self {
        Self {
            frame_period_ms: 100,
            packets_per_frame: 8,
            size: ParetoConfig {
                shape: 0.7,
                min: 215.0,
                max: 1500.0,
            },
            size_scale: 1.0,
            gap_ms: ParetoConfig {
                shape: 1.2,
                min: 2.5,
                max: 12.5,
            },
            load_fraction: None,
            mean_rate_range_bps: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficConfig {
    pub live_video_ues: usize,
    pub streaming_ues: usize,
    pub live_video: LiveVideoConfig,
    pub streaming: StreamingConfig,
    /// Length of the full-buffer calibration run used by
    /// `streaming.load_fraction`, subframes.
    pub calibration_subframes: u64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            live_video_ues: 5,
            streaming_ues: 15,
            live_video: LiveVideoConfig::default(),
            streaming: StreamingConfig::default(),
            calibration_subframes: 3000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarqConfig {
    /// Decode success probability per attempt; its length is the attempt
    /// budget.
    pub decode_probs: Vec<f64>,
}

impl Default for HarqConfig {
    fn default() -> Self {
        Self {
            decode_probs: vec![0.5, 0.5, 0.5, 0.5, 0.9, 0.99, 0.999],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BsrConfig {
    /// When true, a lossless side channel reports the queue every
    /// subframe (with the normal decode latency) instead of in-band
    /// reports. For estimator validation.
    pub ideal: bool,
    /// In-band report period, subframes.
    pub period_subframes: u64,
}

impl Default for BsrConfig {
    fn default() -> Self {
        Self {
            ideal: false,
            period_subframes: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrConfig {
    /// Scheduling-request opportunity period, subframes.
    pub period_subframes: u64,
    /// Delay from a received request to its probe grant, subframes.
    pub grant_delay_subframes: u64,
    /// Probe grant size, bytes.
    pub probe_bytes: f64,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            period_subframes: 10,
            grant_delay_subframes: 3,
            probe_bytes: 200.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerWeights {
    /// Reward weight multiplier for live-video users.
    pub live_video_weight: f64,
}

impl Default for SchedulerWeights {
    fn default() -> Self {
        Self {
            live_video_weight: 5.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub duration_subframes: u64,
    /// Packets arriving before this subframe are excluded from summary
    /// statistics.
    pub warmup_subframes: u64,
    pub scheduler: SchedulerKind,
    pub cell: CellConfig,
    pub power: PowerConfig,
    pub traffic: TrafficConfig,
    pub harq: HarqConfig,
    pub bsr: BsrConfig,
    pub sr: SrConfig,
    pub weights: SchedulerWeights,
    /// Cap on scheduler-issued grants per subframe; unlimited when unset.
    pub max_new_grants: Option<usize>,
    /// Collect per-subframe diagnostics (queue truth vs estimate, grant
    /// map). Costs memory; off by default.
    pub diag: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration_subframes: 10_000,
            warmup_subframes: 0,
            scheduler: SchedulerKind::Hol,
            cell: CellConfig::default(),
            power: PowerConfig::default(),
            traffic: TrafficConfig::default(),
            harq: HarqConfig::default(),
            bsr: BsrConfig::default(),
            sr: SrConfig::default(),
            weights: SchedulerWeights::default(),
            max_new_grants: None,
            diag: false,
        }
    }
}

impl SimConfig {
    pub fn n_ues(&self) -> usize {
        self.traffic.live_video_ues + self.traffic.streaming_ues
    }

    pub fn class_of(&self, ue: usize) -> TrafficClass {
        if ue < self.traffic.live_video_ues {
            TrafficClass::LiveVideo
        } else {
            TrafficClass::Streaming
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.cell.n_rbs == 0 {
            return Err("cell.n_rbs must be positive".into());
        }
        if self.n_ues() == 0 {
            return Err("at least one user is required".into());
        }
        if self.duration_subframes == 0 {
            return Err("duration_subframes must be positive".into());
        }
        if self.harq.decode_probs.is_empty() {
            return Err("harq.decode_probs must not be empty".into());
        }
        if self
            .harq
            .decode_probs
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err("harq.decode_probs entries must be in [0, 1]".into());
        }
        if self.bsr.period_subframes == 0 || self.sr.period_subframes == 0 {
            return Err("report periods must be positive".into());
        }
        if !(self.sr.probe_bytes > 0.0) {
            return Err("sr.probe_bytes must be positive".into());
        }
        if !(self.cell.pathloss_max_db >= self.cell.pathloss_min_db) {
            return Err("cell.pathloss_max_db must be >= pathloss_min_db".into());
        }
        if self.warmup_subframes >= self.duration_subframes {
            return Err("warmup_subframes must be below duration_subframes".into());
        }
        if let Some(f) = self.traffic.streaming.load_fraction {
            if !(f > 0.0) || !f.is_finite() {
                return Err("streaming.load_fraction must be positive".into());
            }
            if self.traffic.calibration_subframes == 0 {
                return Err("calibration_subframes must be positive".into());
            }
        }
        if let Some((lo, hi)) = self.traffic.streaming.mean_rate_range_bps {
            if !(lo > 0.0) || !(hi >= lo) {
                return Err("streaming.mean_rate_range_bps must be a positive range".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = SimConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: SimConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.scheduler, cfg.scheduler);
        assert_eq!(back.cell.n_rbs, cfg.cell.n_rbs);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_name() {
        let err = serde_json::from_str::<SimConfig>(r#"{"sched": "hol"}"#).unwrap_err();
        assert!(err.to_string().contains("sched"), "{err}");
        let err =
            serde_json::from_str::<SimConfig>(r#"{"cell": {"n_rb": 50}}"#).unwrap_err();
        assert!(err.to_string().contains("n_rb"), "{err}");
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg: SimConfig =
            serde_json::from_str(r#"{"scheduler": "max_weight", "seed": 7}"#).unwrap();
        assert_eq!(cfg.scheduler, SchedulerKind::MaxWeight);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.cell.n_rbs, CellConfig::default().n_rbs);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = SimConfig::default();
        cfg.harq.decode_probs = vec![1.5];
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::default();
        cfg.traffic.live_video_ues = 0;
        cfg.traffic.streaming_ues = 0;
        assert!(cfg.validate().is_err());
    }
}
