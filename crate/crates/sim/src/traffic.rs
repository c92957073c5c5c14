//! Traffic sources: ON/OFF live video and truncated-Pareto streaming.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use rand_chacha::ChaCha8Rng;

use crate::config::{LiveVideoConfig, ParetoConfig, StreamingConfig};

/// Pareto distribution truncated to `[min, max]`, sampled by inverse CDF.
#[derive(Debug, Clone, Copy)]
pub struct TruncatedPareto {
    shape: f64,
    min: f64,
    max: f64,
    /// Precomputed `1 - (min/max)^shape`.
    tail: f64,
}

impl TruncatedPareto {
    pub fn new(cfg: &ParetoConfig) -> Self {
        assert!(cfg.shape > 0.0 && cfg.min > 0.0 && cfg.max > cfg.min);
        Self {
            shape: cfg.shape,
            min: cfg.min,
            max: cfg.max,
            tail: 1.0 - (cfg.min / cfg.max).powf(cfg.shape),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        self.min / (1.0 - u * self.tail).powf(1.0 / self.shape)
    }

    /// Closed-form mean (shape != 1).
    pub fn mean(&self) -> f64 {
        let a = self.shape;
        a * self.min.powf(a) / self.tail * (self.max.powf(1.0 - a) - self.min.powf(1.0 - a))
            / (1.0 - a)
    }
}

enum SourceState {
    LiveVideo {
        on: bool,
        next_toggle: u64,
        next_packet: u64,
        packet_bytes: f64,
    },
    Streaming {
        next_frame: u64,
        /// Arrival times and sizes already drawn for the current frame,
        /// soonest last.
        pending: Vec<(u64, f64)>,
    },
    /// Saturating source for throughput calibration: a fixed chunk every
    /// subframe, far above any serviceable rate.
    FullBuffer { chunk: f64 },
}

/// Mean source rate of the streaming model before scaling, bit/s.
pub fn streaming_base_rate_bps(cfg: &StreamingConfig) -> f64 {
    let mean_size = TruncatedPareto::new(&cfg.size).mean();
    mean_size * 8.0 * cfg.packets_per_frame as f64 / (cfg.frame_period_ms as f64 * 1e-3)
}

/// One user's packet arrival process.
pub struct TrafficSource {
    rng: ChaCha8Rng,
    state: SourceState,
    live: LiveVideoConfig,
    stream: StreamingConfig,
}

impl TrafficSource {
    pub fn live_video(cfg: &LiveVideoConfig, mut rng: ChaCha8Rng) -> Self {
        // Packet carries the ON-rate bytes accumulated over one period.
        let packet_bytes =
            (cfg.on_rate_bps * cfg.packet_period_ms as f64 * 1e-3 / 8.0).round();
        let first_toggle = Self::exp_ms(&mut rng, cfg.mean_off_ms);
        Self {
            rng,
            state: SourceState::LiveVideo {
                on: false,
                next_toggle: first_toggle,
                next_packet: u64::MAX,
                packet_bytes,
            },
            live: cfg.clone(),
            stream: StreamingConfig::default(),
        }
    }

    pub fn streaming(cfg: &StreamingConfig, rng: ChaCha8Rng) -> Self {
        Self {
            rng,
            state: SourceState::Streaming {
                next_frame: 0,
                pending: Vec::new(),
            },
            live: LiveVideoConfig::default(),
            stream: cfg.clone(),
        }
    }

    pub fn full_buffer(chunk_bytes: f64, rng: ChaCha8Rng) -> Self {
        Self {
            rng,
            state: SourceState::FullBuffer { chunk: chunk_bytes },
            live: LiveVideoConfig::default(),
            stream: StreamingConfig::default(),
        }
    }

    fn exp_ms(rng: &mut ChaCha8Rng, mean_ms: f64) -> u64 {
        let d = Exp::new(1.0 / mean_ms.max(1e-9)).expect("positive mean");
        d.sample(rng).round().max(1.0) as u64
    }

    /// Packet sizes arriving at subframe `sf`. Must be called for every
    /// subframe in order.
    pub fn poll(&mut self, sf: u64) -> Vec<f64> {
        let mut out = Vec::new();
        match &mut self.state {
            SourceState::LiveVideo {
                on,
                next_toggle,
                next_packet,
                packet_bytes,
            } => {
                while sf >= *next_toggle {
                    *on = !*on;
                    let mean = if *on {
                        self.live.mean_on_ms
                    } else {
                        self.live.mean_off_ms
                    };
                    let start = *next_toggle;
                    *next_toggle = start + Self::exp_ms(&mut self.rng, mean);
                    *next_packet = if *on { start } else { u64::MAX };
                }
                while *on && sf >= *next_packet {
                    if sf == *next_packet {
                        out.push(*packet_bytes);
                    }
                    *next_packet += self.live.packet_period_ms;
                }
            }
            SourceState::Streaming {
                next_frame,
                pending,
            } => {
                while sf >= *next_frame {
                    let sizes = TruncatedPareto::new(&self.stream.size);
                    let gaps = TruncatedPareto::new(&self.stream.gap_ms);
                    let mut t_ms = *next_frame as f64;
                    for _ in 0..self.stream.packets_per_frame {
                        let bytes =
                            (sizes.sample(&mut self.rng) * self.stream.size_scale).round();
                        pending.push((t_ms.round() as u64, bytes.max(1.0)));
                        t_ms += gaps.sample(&mut self.rng);
                    }
                    pending.sort_by(|a, b| b.0.cmp(&a.0));
                    *next_frame += self.stream.frame_period_ms;
                }
                while pending.last().is_some_and(|&(t, _)| t <= sf) {
                    out.push(pending.pop().expect("nonempty").1);
                }
            }
            SourceState::FullBuffer { chunk } => out.push(*chunk),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn truncated_pareto_stays_in_bounds_and_matches_its_mean() {
        let cfg = ParetoConfig {
            shape: 0.7,
            min: 215.0,
            max: 1500.0,
        };
        let d = TruncatedPareto::new(&cfg);
        // Closed-form mean of the base size distribution.
        assert!((d.mean() - 533.8682596529675).abs() < 1e-9);
        let mut r = rng(11);
        let n = 200_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = d.sample(&mut r);
            assert!((cfg.min..=cfg.max).contains(&x));
            sum += x;
        }
        let sample_mean = sum / n as f64;
        assert!(
            (sample_mean - d.mean()).abs() < 0.01 * d.mean(),
            "sample mean {sample_mean} vs {}",
            d.mean()
        );
    }

    #[test]
    fn gap_distribution_matches_its_mean_too() {
        let cfg = ParetoConfig {
            shape: 1.2,
            min: 2.5,
            max: 12.5,
        };
        let d = TruncatedPareto::new(&cfg);
        let mut r = rng(12);
        let n = 200_000;
        let sum: f64 = (0..n).map(|_| d.sample(&mut r)).sum();
        assert!((sum / n as f64 - d.mean()).abs() < 0.01 * d.mean());
    }

    #[test]
    fn live_video_emits_fixed_packets_on_a_grid_while_on() {
        let cfg = LiveVideoConfig::default();
        let mut src = TrafficSource::live_video(&cfg, rng(5));
        let expect_bytes = (cfg.on_rate_bps * 0.02 / 8.0).round();
        let mut arrivals = Vec::new();
        for sf in 0..200_000u64 {
            for b in src.poll(sf) {
                assert_eq!(b, expect_bytes);
                arrivals.push(sf);
            }
        }
        assert!(!arrivals.is_empty());
        // Consecutive packets inside a burst sit exactly one period apart.
        let mut on_grid = 0;
        for w in arrivals.windows(2) {
            if w[1] - w[0] == cfg.packet_period_ms {
                on_grid += 1;
            }
        }
        assert!(on_grid * 2 > arrivals.len(), "bursts should dominate");
        // Duty cycle near one half.
        let frac = arrivals.len() as f64 * cfg.packet_period_ms as f64 / 200_000.0;
        assert!((0.3..0.7).contains(&frac), "ON fraction {frac}");
    }

    #[test]
    fn streaming_emits_frames_of_packets() {
        let cfg = StreamingConfig::default();
        let mut src = TrafficSource::streaming(&cfg, rng(9));
        let mut count = 0usize;
        let mut bytes = 0.0;
        for sf in 0..100_000u64 {
            for b in src.poll(sf) {
                assert!((cfg.size.min..=cfg.size.max + 1.0).contains(&b));
                count += 1;
                bytes += b;
            }
        }
        let frames = 100_000 / cfg.frame_period_ms as usize;
        assert_eq!(count, frames * cfg.packets_per_frame);
        let mean = bytes / count as f64;
        assert!((mean - 533.868).abs() < 0.02 * 533.868, "mean {mean}");
    }

    #[test]
    fn sources_are_deterministic_per_seed() {
        let cfg = StreamingConfig::default();
        let mut a = TrafficSource::streaming(&cfg, rng(3));
        let mut b = TrafficSource::streaming(&cfg, rng(3));
        for sf in 0..5000u64 {
            assert_eq!(a.poll(sf), b.poll(sf));
        }
    }
}
