//! Delivered-packet records and delay statistics.

use serde::{Deserialize, Serialize};

use crate::config::TrafficClass;

/// One delivered (or abandoned-at-end) traffic packet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub ue: u16,
    pub class: TrafficClass,
    pub arrival_sf: u64,
    /// Subframe of the transmission that delivered the last byte.
    pub departure_sf: u64,
    pub bytes: f64,
}

impl PacketRecord {
    pub fn delay_ms(&self) -> f64 {
        (self.departure_sf - self.arrival_sf) as f64
    }
}

/// Nearest-rank percentile: the smallest element with at least `q` of the
/// sample at or below it. `values` need not be sorted.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN delays"));
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// Delay statistics of one (scheduler, class) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scheduler: String,
    pub class: TrafficClass,
    pub packets: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
}

pub fn summarize(scheduler: &str, packets: &[PacketRecord]) -> Vec<SummaryRow> {
    [TrafficClass::LiveVideo, TrafficClass::Streaming]
        .into_iter()
        .filter_map(|class| {
            let delays: Vec<f64> = packets
                .iter()
                .filter(|p| p.class == class)
                .map(|p| p.delay_ms())
                .collect();
            if delays.is_empty() {
                return None;
            }
            Some(SummaryRow {
                scheduler: scheduler.to_string(),
                class,
                packets: delays.len(),
                p50_ms: percentile(&delays, 0.50).expect("nonempty"),
                p95_ms: percentile(&delays, 0.95).expect("nonempty"),
                mean_ms: delays.iter().sum::<f64>() / delays.len() as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_on_a_known_sample() {
        // Classic worked example: ranks are ceil(q*n) in 1-based order.
        let v = [15.0, 20.0, 35.0, 40.0, 50.0];
        assert_eq!(percentile(&v, 0.05), Some(15.0));
        assert_eq!(percentile(&v, 0.30), Some(20.0));
        assert_eq!(percentile(&v, 0.40), Some(20.0));
        assert_eq!(percentile(&v, 0.50), Some(35.0));
        assert_eq!(percentile(&v, 0.95), Some(50.0));
        assert_eq!(percentile(&v, 1.00), Some(50.0));
        assert_eq!(percentile(&[], 0.5), None);
    }

    #[test]
    fn summary_splits_by_class() {
        let packets = vec![
            PacketRecord {
                ue: 0,
                class: TrafficClass::LiveVideo,
                arrival_sf: 0,
                departure_sf: 10,
                bytes: 100.0,
            },
            PacketRecord {
                ue: 1,
                class: TrafficClass::Streaming,
                arrival_sf: 5,
                departure_sf: 45,
                bytes: 700.0,
            },
            PacketRecord {
                ue: 1,
                class: TrafficClass::Streaming,
                arrival_sf: 6,
                departure_sf: 16,
                bytes: 700.0,
            },
        ];
        let rows = summarize("hol", &packets);
        assert_eq!(rows.len(), 2);
        let stream = rows
            .iter()
            .find(|r| r.class == TrafficClass::Streaming)
            .unwrap();
        assert_eq!(stream.packets, 2);
        assert_eq!(stream.p50_ms, 10.0);
        assert_eq!(stream.p95_ms, 40.0);
        assert_eq!(stream.mean_ms, 25.0);
    }
}
