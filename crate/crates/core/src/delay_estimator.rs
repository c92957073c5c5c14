//! Uplink queue and delay estimation from grant, HARQ and buffer-report
//! events.
//!
//! The receiver side of an uplink scheduler never sees arrivals directly:
//! it learns about queue levels from sparse, delayed buffer reports and
//! must reconcile them with the grants it issued in between. This module
//! keeps a short history of estimated queue levels, attributes each report
//! discrepancy as an arrival at the report's generation subframe, and
//! reconstructs a delay-tagged packet view of the queue for the scheduler.

use std::collections::{BTreeSet, VecDeque};
use std::io::BufRead;
use std::ops::Bound;

use crate::reward::{QosQueue, QueuedPacket};
use crate::{require_finite, Error, Result};

/// History window length in subframes. A report generated this long ago can
/// no longer be reconciled against the estimate and is dropped as stale.
/// Covers the worst-case transport round trip: six transmission attempts,
/// eight subframes apart.
pub const RETX_WINDOW_SUBFRAMES: u64 = 48;

/// Arrival-record count that triggers a prune of records the snapshot can
/// no longer reach.
const PRUNE_TRIGGER_RECORDS: usize = 1024;

/// Bytes assumed outstanding when only a scheduling request has been seen.
pub const DEFAULT_SR_HINT_BYTES: f64 = 200.0;

/// One attributed arrival: `bytes` entered the queue at subframe `gen`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ArrivalRecord {
    gen: u64,
    bytes: f64,
}

/// Result of folding one buffer report into the estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsrUpdate {
    /// Subframe the report was generated in.
    pub gen: u64,
    /// Bytes attributed as having arrived at `gen` (negative when the
    /// report shows a smaller queue than estimated).
    pub attributed_bytes: f64,
    /// Change to the current queue estimate. Equals `attributed_bytes` for
    /// an in-order report; zero for an out-of-order one, whose attribution
    /// is offset at the later already-received generation.
    pub net_queue_change: f64,
}

/// Per-user queue estimator driven by scheduling, HARQ-failure and
/// buffer-report events.
#[derive(Debug, Clone)]
pub struct QueueEstimator {
    now: u64,
    /// Net queue change per subframe for the window `[window_start(), now]`;
    /// index `g - window_start()`. Invariant: `len == now - window_start() + 1`.
    deltas: VecDeque<f64>,
    /// Estimated queue just before the window: all deltas older than
    /// `window_start()` folded together.
    base: f64,
    /// Attributed arrivals in generation order, all positive. Never consumed
    /// by scheduling; the served depth is recovered from totals at snapshot
    /// time, which lets returned (failed) bytes reappear with their original
    /// age. Records the estimate can no longer reach are pruned, so the
    /// length tracks the backlog's report granularity, not the run length.
    arrivals: VecDeque<ArrivalRecord>,
    /// Record count at which the next prune pass runs.
    prune_trigger: usize,
    /// Generations with a received buffer report, for out-of-order matching.
    bsr_gens: BTreeSet<u64>,
    stale_reports: u64,
    /// Pending scheduling-request hint, shown only while the estimate is
    /// empty and cleared by the next report.
    sr_hint: Option<u64>,
    sr_hint_bytes: f64,
}

impl Default for QueueEstimator {
    fn default() -> Self {
        Self::new()
    }
}

impl QueueEstimator {
    pub fn new() -> Self {
        Self {
            now: 0,
            deltas: VecDeque::from([0.0]),
            base: 0.0,
            arrivals: VecDeque::new(),
            prune_trigger: PRUNE_TRIGGER_RECORDS,
            bsr_gens: BTreeSet::new(),
            stale_reports: 0,
            sr_hint: None,
            sr_hint_bytes: DEFAULT_SR_HINT_BYTES,
        }
    }

    pub fn with_sr_hint_bytes(mut self, bytes: f64) -> Self {
        self.sr_hint_bytes = bytes;
        self
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn window_start(&self) -> u64 {
        self.now + 1 - self.deltas.len() as u64
    }

    pub fn stale_report_count(&self) -> u64 {
        self.stale_reports
    }

    /// Estimated queue at the current subframe. May be negative when grants
    /// outran the last report; snapshots clamp at zero.
    pub fn estimated_queue(&self) -> f64 {
        self.base + self.deltas.iter().sum::<f64>()
    }

    /// Estimated queue at the end of subframe `t`, if `t` is still inside
    /// the reconciliation window.
    pub fn estimated_queue_at(&self, t: u64) -> Option<f64> {
        if t < self.window_start() || t > self.now {
            return None;
        }
        let upto = (t - self.window_start()) as usize;
        Some(self.base + self.deltas.iter().take(upto + 1).sum::<f64>())
    }

    /// Attributed arrivals still on record, oldest first, as `(gen, bytes)`.
    pub fn attributed_arrivals(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.arrivals.iter().map(|r| (r.gen, r.bytes))
    }

    /// Move the clock forward without recording an event.
    pub fn advance_to(&mut self, t: u64) {
        while self.now < t {
            self.now += 1;
            self.deltas.push_back(0.0);
            while self.deltas.len() as u64 > RETX_WINDOW_SUBFRAMES + 1 {
                self.base += self.deltas.pop_front().expect("window nonempty");
            }
        }
        if self.arrivals.len() >= self.prune_trigger {
            self.prune_unreachable();
        }
    }

    /// `bytes` were granted for transmission in subframe `t`; the queue
    /// estimate drops by that amount there.
    pub fn on_scheduled(&mut self, t: u64, bytes: f64) -> Result<()> {
        let bytes = require_finite("scheduled_bytes", bytes)?;
        if bytes < 0.0 {
            return Err(Error::InvalidParameter {
                name: "scheduled_bytes",
                value: bytes,
            });
        }
        self.advance_to(t);
        self.add_delta(t, -bytes);
        Ok(())
    }

    /// A transport block carrying `bytes` exhausted its transmission
    /// attempts at subframe `t`; the bytes are still queued at the sender.
    pub fn on_failed(&mut self, t: u64, bytes: f64) -> Result<()> {
        let bytes = require_finite("failed_bytes", bytes)?;
        if bytes < 0.0 {
            return Err(Error::InvalidParameter {
                name: "failed_bytes",
                value: bytes,
            });
        }
        self.advance_to(t);
        self.add_delta(t, bytes);
        Ok(())
    }

    /// A scheduling request was decoded at subframe `t`: the sender has data
    /// but no report has been received yet. Snapshots show a provisional
    /// packet until the next report arrives. Repeated requests for the same
    /// unreported data keep the first request's age.
    pub fn on_sr(&mut self, t: u64) {
        self.advance_to(t);
        self.sr_hint = Some(self.sr_hint.map_or(t, |g| g.min(t)));
    }

    /// Fold in a buffer report of `bytes`, received at `rx_time` and
    /// generated `age` subframes earlier. Returns the attribution made, or
    /// `None` when the report predates the reconciliation window.
    pub fn on_bsr(&mut self, bytes: f64, rx_time: u64, age: u64) -> Result<Option<BsrUpdate>> {
        let bytes = require_finite("report_bytes", bytes)?;
        if bytes < 0.0 {
            return Err(Error::InvalidParameter {
                name: "report_bytes",
                value: bytes,
            });
        }
        if age > rx_time {
            return Err(Error::InvalidParameter {
                name: "report_age",
                value: age as f64,
            });
        }
        self.advance_to(rx_time);
        let gen = rx_time - age;
        if gen < self.window_start() {
            self.stale_reports += 1;
            return Ok(None);
        }
        self.sr_hint = None;
        let estimate = self
            .estimated_queue_at(gen)
            .expect("generation is inside the window");
        let attributed = bytes - estimate;
        // A later-generated report already received pins the queue from its
        // own generation onward; this report's discrepancy is new
        // information only for [gen, later_gen), so book an offsetting
        // correction at the later generation.
        let later = self
            .bsr_gens
            .range((Bound::Excluded(gen), Bound::Unbounded))
            .next()
            .copied();
        self.bsr_gens.insert(gen);
        let floor = self.window_start();
        self.bsr_gens = self.bsr_gens.split_off(&floor);
        if attributed != 0.0 {
            self.add_delta(gen, attributed);
            match later {
                Some(later_gen) => {
                    self.add_delta(later_gen, -attributed);
                    if attributed > 0.0 {
                        self.insert_arrival(gen, attributed);
                        self.cancel_bytes(attributed, Some(later_gen), None);
                    } else {
                        self.insert_arrival(later_gen, -attributed);
                        self.cancel_bytes(-attributed, Some(gen), Some(later_gen));
                    }
                }
                None if attributed > 0.0 => self.insert_arrival(gen, attributed),
                None => self.cancel_bytes(-attributed, None, None),
            }
        }
        Ok(Some(BsrUpdate {
            gen,
            attributed_bytes: attributed,
            net_queue_change: if later.is_some() { 0.0 } else { attributed },
        }))
    }

    /// Delay-tagged view of the estimated queue contents at the current
    /// subframe. Service is head-of-line first, so the remaining bytes are
    /// the newest attributed arrivals.
    pub fn snapshot_packets(&self, subframe_ms: f64) -> Result<QosQueue> {
        let total = self.estimated_queue().max(0.0);
        if total <= 0.0 {
            if let Some(gen) = self.sr_hint {
                let packet = QueuedPacket {
                    bytes: self.sr_hint_bytes,
                    delay_ms: (self.now - gen) as f64 * subframe_ms,
                };
                return QosQueue::new(vec![packet], subframe_ms);
            }
            return Ok(QosQueue::empty(subframe_ms));
        }
        let mut remaining = total;
        let mut packets = Vec::new();
        for rec in self.arrivals.iter().rev() {
            if remaining <= 0.0 {
                break;
            }
            let take = rec.bytes.min(remaining);
            if take > 0.0 {
                packets.push(QueuedPacket {
                    bytes: take,
                    delay_ms: (self.now - rec.gen) as f64 * subframe_ms,
                });
            }
            remaining -= take;
        }
        if remaining > 0.0 {
            // Bytes beyond every recorded arrival: pin them at the oldest
            // generation still known.
            let gen = self
                .arrivals
                .front()
                .map_or_else(|| self.window_start(), |r| r.gen);
            packets.push(QueuedPacket {
                bytes: remaining,
                delay_ms: (self.now - gen) as f64 * subframe_ms,
            });
        }
        QosQueue::new(packets, subframe_ms)
    }

    /// Age of the oldest estimated-unserved byte, `None` for an empty
    /// estimate with no pending scheduling request.
    pub fn hol_delay_ms(&self, subframe_ms: f64) -> Option<f64> {
        let total = self.estimated_queue().max(0.0);
        if total <= 0.0 {
            return self
                .sr_hint
                .map(|gen| (self.now - gen) as f64 * subframe_ms);
        }
        let mut remaining = total;
        let mut oldest: Option<u64> = None;
        for rec in self.arrivals.iter().rev() {
            if remaining <= 0.0 {
                break;
            }
            remaining -= rec.bytes.min(remaining);
            oldest = Some(rec.gen);
        }
        if remaining > 0.0 {
            let fallback = self
                .arrivals
                .front()
                .map_or_else(|| self.window_start(), |r| r.gen);
            oldest = Some(oldest.map_or(fallback, |g| g.min(fallback)));
        }
        oldest.map(|g| (self.now - g) as f64 * subframe_ms)
    }

    /// Apply one replayed trace event.
    pub fn apply(&mut self, event: TraceEvent) -> Result<()> {
        match event {
            TraceEvent::Scheduled { time, bytes } => self.on_scheduled(time, bytes),
            TraceEvent::Failed { time, bytes } => self.on_failed(time, bytes),
            TraceEvent::BufferReport {
                rx_time,
                bytes,
                age,
            } => self.on_bsr(bytes, rx_time, age).map(|_| ()),
            TraceEvent::SchedulingRequest { time } => {
                self.on_sr(time);
                Ok(())
            }
        }
    }

    fn add_delta(&mut self, t: u64, v: f64) {
        debug_assert!(t <= self.now);
        if t < self.window_start() {
            self.base += v;
        } else {
            let idx = (t - self.window_start()) as usize;
            self.deltas[idx] += v;
        }
    }

    fn insert_arrival(&mut self, gen: u64, bytes: f64) {
        debug_assert!(bytes > 0.0);
        let mut idx = self.arrivals.len();
        while idx > 0 {
            match self.arrivals[idx - 1].gen.cmp(&gen) {
                std::cmp::Ordering::Less => break,
                std::cmp::Ordering::Equal => {
                    self.arrivals[idx - 1].bytes += bytes;
                    return;
                }
                std::cmp::Ordering::Greater => idx -= 1,
            }
        }
        self.arrivals.insert(idx, ArrivalRecord { gen, bytes });
    }

    /// Remove `amount` bytes from the arrival records. Entries with
    /// generation in `[at_or_after, before)` go first (the span an
    /// out-of-order correction belongs to); any remainder cancels oldest
    /// first, starting with compacted history.
    fn cancel_bytes(&mut self, mut amount: f64, at_or_after: Option<u64>, before: Option<u64>) {
        if let Some(lo) = at_or_after {
            for rec in self.arrivals.iter_mut() {
                if amount <= 0.0 {
                    break;
                }
                if rec.gen < lo {
                    continue;
                }
                if before.is_some_and(|hi| rec.gen >= hi) {
                    break;
                }
                let take = rec.bytes.min(amount);
                rec.bytes -= take;
                amount -= take;
            }
        }
        while amount > 0.0 {
            let Some(front) = self.arrivals.front_mut() else {
                break;
            };
            let take = front.bytes.min(amount);
            front.bytes -= take;
            amount -= take;
            if front.bytes <= 0.0 {
                self.arrivals.pop_front();
            }
        }
        self.arrivals.retain(|r| r.bytes > 0.0);
    }

    /// Drop arrival records the snapshot can never consume again. Snapshots
    /// map the queue estimate onto records newest-first, and the estimate
    /// can only grow by bytes of failed transport blocks returning, all
    /// booked as negative deltas still inside the window; records older
    /// than that reach are permanently below the served depth.
    fn prune_unreachable(&mut self) {
        let returnable: f64 = self.deltas.iter().map(|d| (-d).max(0.0)).sum();
        let mut reach = self.estimated_queue().max(0.0) + returnable;
        let mut keep = self.arrivals.len();
        while keep > 0 && reach > 0.0 {
            keep -= 1;
            reach -= self.arrivals[keep].bytes;
        }
        self.arrivals.drain(..keep);
        self.prune_trigger = PRUNE_TRIGGER_RECORDS.max(2 * self.arrivals.len());
    }
}

/// One line of an estimator event trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceEvent {
    Scheduled { time: u64, bytes: f64 },
    Failed { time: u64, bytes: f64 },
    BufferReport { rx_time: u64, bytes: f64, age: u64 },
    SchedulingRequest { time: u64 },
}

/// Summary of a full trace replay.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub events: usize,
    pub queue_bytes: f64,
    pub hol_delay_ms: Option<f64>,
    pub packet_count: usize,
    pub stale_reports: u64,
}

fn parse_fields(s: &str) -> std::result::Result<Option<TraceEvent>, String> {
    let s = s.trim();
    if s.is_empty() || s.starts_with('#') {
        return Ok(None);
    }
    let mut it = s.split_whitespace();
    let time: u64 = it
        .next()
        .expect("nonempty line has a first field")
        .parse()
        .map_err(|e| format!("bad subframe index: {e}"))?;
    let kind = it.next().ok_or("missing event kind")?;
    let mut num = |name: &str| -> std::result::Result<f64, String> {
        it.next()
            .ok_or(format!("missing {name}"))?
            .parse::<f64>()
            .map_err(|e| format!("bad {name}: {e}"))
    };
    let event = match kind {
        "SCHED" => TraceEvent::Scheduled {
            time,
            bytes: num("scheduled bytes")?,
        },
        "FAIL" => TraceEvent::Failed {
            time,
            bytes: num("failed bytes")?,
        },
        "BSR" => {
            let bytes = num("report bytes")?;
            let age = num("report age")?;
            if age < 0.0 || age.fract() != 0.0 {
                return Err(format!("report age must be a whole subframe count, got {age}"));
            }
            TraceEvent::BufferReport {
                rx_time: time,
                bytes,
                age: age as u64,
            }
        }
        "SR" => TraceEvent::SchedulingRequest { time },
        other => return Err(format!("unknown event kind {other:?}")),
    };
    if it.next().is_some() {
        return Err("trailing fields after event".to_string());
    }
    Ok(Some(event))
}

/// Parse one trace line: `t SCHED bytes`, `t FAIL bytes`,
/// `t BSR bytes age` or `t SR`. Blank lines and `#` comments yield `None`.
/// `line_no` is used only for error reporting.
pub fn parse_trace_line(line: &str, line_no: usize) -> Result<Option<TraceEvent>> {
    parse_fields(line).map_err(|msg| Error::TraceParse { line: line_no, msg })
}

/// Replay a whole event trace into a fresh estimator.
pub fn replay_trace<R: BufRead>(reader: R, subframe_ms: f64) -> Result<(QueueEstimator, ReplayReport)> {
    let mut est = QueueEstimator::new();
    let mut events = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::TraceParse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if let Some(event) = parse_trace_line(&line, idx + 1)? {
            est.apply(event)?;
            events += 1;
        }
    }
    let snapshot = est.snapshot_packets(subframe_ms)?;
    let report = ReplayReport {
        events,
        queue_bytes: est.estimated_queue().max(0.0),
        hol_delay_ms: est.hol_delay_ms(subframe_ms),
        packet_count: snapshot.len(),
        stale_reports: est.stale_report_count(),
    };
    Ok((est, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    // Grant-before-report sequence: 200 bytes scheduled at subframe 9, then
    // a report of 800 generated in that same subframe arrives at 17. The
    // whole 1000-byte discrepancy is one arrival at subframe 9, and the 800
    // still queued are 8 ms old when the report lands.
    #[test]
    fn attributes_missing_bytes_as_one_arrival() {
        let mut est = QueueEstimator::new();
        est.on_scheduled(9, 200.0).unwrap();
        assert_eq!(est.estimated_queue(), -200.0);
        let up = est.on_bsr(800.0, 17, 8).unwrap().unwrap();
        assert_eq!(up.gen, 9);
        assert_eq!(up.attributed_bytes, 1000.0);
        assert_eq!(est.estimated_queue_at(9), Some(800.0));
        assert_eq!(est.estimated_queue(), 800.0);
        let arrivals: Vec<_> = est.attributed_arrivals().collect();
        assert_eq!(arrivals, vec![(9, 1000.0)]);
        let q = est.snapshot_packets(1.0).unwrap();
        assert_eq!(q.len(), 1);
        assert_eq!(q.packets()[0].bytes, 800.0);
        assert_eq!(q.packets()[0].delay_ms, 8.0);
        assert_eq!(est.hol_delay_ms(1.0), Some(8.0));
    }

    #[test]
    fn first_report_attributes_entire_queue() {
        let mut est = QueueEstimator::new();
        let up = est.on_bsr(500.0, 5, 0).unwrap().unwrap();
        assert_eq!(up.gen, 5);
        assert_eq!(up.attributed_bytes, 500.0);
        let q = est.snapshot_packets(1.0).unwrap();
        assert_eq!(q.total_bytes(), 500.0);
        assert_eq!(q.hol_delay_ms(), 0.0);
    }

    // The estimate always equals attributed - scheduled + failed, even after
    // old subframes fold out of the window.
    #[test]
    fn conservation_identity_over_random_events() {
        let mut est = QueueEstimator::new();
        let mut state = 0x2545f4914f6cdd1du64;
        let mut rng = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let (mut attributed, mut scheduled, mut failed) = (0.0, 0.0, 0.0);
        for t in 0..400u64 {
            match rng() % 4 {
                0 => {
                    let c = (rng() % 300) as f64;
                    est.on_scheduled(t, c).unwrap();
                    scheduled += c;
                }
                1 => {
                    let f = (rng() % 150) as f64;
                    est.on_failed(t, f).unwrap();
                    failed += f;
                }
                2 => {
                    let bytes = (rng() % 5000) as f64;
                    let age = rng() % 10;
                    if let Some(up) = est.on_bsr(bytes, t, age.min(t)).unwrap() {
                        attributed += up.net_queue_change;
                    }
                }
                _ => est.advance_to(t),
            }
        }
        assert_eq!(est.estimated_queue(), attributed - scheduled + failed);
    }

    // Reports generated at subframes 2 and 7 produce the same estimate and
    // the same attributed arrivals whichever order they are decoded in.
    #[test]
    fn out_of_order_reports_match_in_order_delivery() {
        let mut in_order = QueueEstimator::new();
        in_order.on_scheduled(4, 50.0).unwrap();
        in_order.on_bsr(400.0, 6, 4).unwrap();
        in_order.on_bsr(900.0, 7, 0).unwrap();

        let mut reordered = QueueEstimator::new();
        reordered.on_scheduled(4, 50.0).unwrap();
        reordered.on_bsr(900.0, 7, 0).unwrap();
        reordered.on_bsr(400.0, 8, 6).unwrap();

        reordered.advance_to(in_order.now().max(reordered.now()));
        in_order.advance_to(reordered.now());
        assert_eq!(in_order.estimated_queue(), reordered.estimated_queue());
        for t in in_order.window_start()..=in_order.now() {
            assert_eq!(
                in_order.estimated_queue_at(t),
                reordered.estimated_queue_at(t),
                "estimates diverge at subframe {t}"
            );
        }
        let a: Vec<_> = in_order.attributed_arrivals().collect();
        let b: Vec<_> = reordered.attributed_arrivals().collect();
        assert_eq!(a, b);
        assert_eq!(a, vec![(2, 400.0), (7, 550.0)]);
    }

    #[test]
    fn stale_reports_are_dropped_and_counted() {
        let mut est = QueueEstimator::new();
        est.on_scheduled(100, 50.0).unwrap();
        let before = est.estimated_queue();
        assert_eq!(est.on_bsr(700.0, 100, 90).unwrap(), None);
        assert_eq!(est.stale_report_count(), 1);
        assert_eq!(est.estimated_queue(), before);
    }

    // A report showing less than the estimate cancels the oldest recorded
    // bytes: the sender serves head-of-line first, so the newest arrivals
    // are the ones still waiting.
    #[test]
    fn shrinking_report_cancels_oldest_bytes_first() {
        let mut est = QueueEstimator::new();
        est.on_bsr(300.0, 2, 2).unwrap();
        est.on_bsr(500.0, 5, 0).unwrap();
        assert_eq!(est.estimated_queue(), 500.0);
        let up = est.on_bsr(100.0, 8, 0).unwrap().unwrap();
        assert_eq!(up.attributed_bytes, -400.0);
        let arrivals: Vec<_> = est.attributed_arrivals().collect();
        assert_eq!(arrivals, vec![(5, 100.0)]);
        assert_eq!(est.hol_delay_ms(1.0), Some(3.0));
    }

    // Bytes whose transport block ultimately fails come back with their
    // original age: the snapshot serves totals head-of-line first, so a
    // larger total re-exposes the older part of the same arrival.
    #[test]
    fn failed_transport_blocks_return_to_head_of_line() {
        let mut est = QueueEstimator::new();
        est.on_bsr(1000.0, 0, 0).unwrap();
        est.on_scheduled(4, 400.0).unwrap();
        assert_eq!(est.estimated_queue(), 600.0);
        assert_eq!(est.hol_delay_ms(1.0), Some(4.0));
        est.on_failed(12, 400.0).unwrap();
        assert_eq!(est.estimated_queue(), 1000.0);
        let q = est.snapshot_packets(1.0).unwrap();
        assert_eq!(q.total_bytes(), 1000.0);
        assert_eq!(q.hol_delay_ms(), 12.0);
    }

    #[test]
    fn window_folding_preserves_the_estimate() {
        let mut est = QueueEstimator::new();
        est.on_bsr(1000.0, 0, 0).unwrap();
        est.on_scheduled(20, 300.0).unwrap();
        est.advance_to(300);
        assert_eq!(est.window_start(), 252);
        assert_eq!(est.estimated_queue(), 700.0);
        assert_eq!(est.estimated_queue_at(252), Some(700.0));
        assert_eq!(est.estimated_queue_at(251), None);
    }

    #[test]
    fn scheduling_request_hint_appears_until_a_report() {
        let mut est = QueueEstimator::new();
        est.on_sr(3);
        est.advance_to(10);
        assert_eq!(est.estimated_queue(), 0.0);
        let q = est.snapshot_packets(1.0).unwrap();
        assert_eq!(q.len(), 1);
        assert_eq!(q.packets()[0].bytes, DEFAULT_SR_HINT_BYTES);
        assert_eq!(q.packets()[0].delay_ms, 7.0);
        assert_eq!(est.hol_delay_ms(1.0), Some(7.0));
        est.on_bsr(0.0, 12, 0).unwrap();
        assert!(est.snapshot_packets(1.0).unwrap().is_empty());
        assert_eq!(est.hol_delay_ms(1.0), None);
    }

    #[test]
    fn pruning_drops_only_records_below_the_served_depth() {
        let mut est = QueueEstimator::new();
        est.on_bsr(500.0, 0, 0).unwrap();
        // Unserved bytes keep their exact age no matter how long they sit.
        est.advance_to(5000);
        assert_eq!(est.attributed_arrivals().count(), 1);
        assert_eq!(est.estimated_queue(), 500.0);
        let q = est.snapshot_packets(1.0).unwrap();
        assert_eq!(q.total_bytes(), 500.0);
        assert_eq!(q.hol_delay_ms(), 5000.0);

        // Reports every subframe build up records, service buries all but
        // the newest 120 bytes, and further reports push the record count
        // over the prune trigger.
        for i in 0..1500u64 {
            est.on_bsr(500.0 + 10.0 * (i + 1) as f64, 5001 + i, 0).unwrap();
        }
        est.on_scheduled(6501, 15_380.0).unwrap();
        est.advance_to(6560);
        for i in 0..600u64 {
            est.on_bsr(120.0 + 10.0 * (i + 1) as f64, 6561 + i, 0).unwrap();
        }
        assert_eq!(est.estimated_queue(), 6120.0);
        // The gen-0 record and the buried flood records are gone...
        assert!(est.attributed_arrivals().count() < 1000);
        assert_eq!(est.attributed_arrivals().next().unwrap().0, 6489);
        // ...while the oldest unserved byte still carries its true age.
        assert_eq!(est.hol_delay_ms(1.0), Some(7160.0 - 6489.0));
        let q = est.snapshot_packets(1.0).unwrap();
        assert_eq!(q.total_bytes(), 6120.0);
    }

    #[test]
    fn replay_parses_events_and_reports_errors() {
        let trace = "# demo\n0 BSR 1000 0\n4 SCHED 400\n12 FAIL 400\n";
        let (est, report) = replay_trace(Cursor::new(trace), 1.0).unwrap();
        assert_eq!(report.events, 3);
        assert_eq!(report.queue_bytes, 1000.0);
        assert_eq!(report.hol_delay_ms, Some(12.0));
        assert_eq!(report.stale_reports, 0);
        assert_eq!(est.estimated_queue(), 1000.0);

        let bad = "0 BSR 1000 0\n\n4 NOPE 1\n";
        match replay_trace(Cursor::new(bad), 1.0) {
            Err(Error::TraceParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_invalid_inputs() {
        let mut est = QueueEstimator::new();
        assert!(est.on_scheduled(1, -5.0).is_err());
        assert!(est.on_failed(1, f64::NAN).is_err());
        assert!(est.on_bsr(-1.0, 5, 0).is_err());
        assert!(est.on_bsr(100.0, 5, 6).is_err());
    }
}
