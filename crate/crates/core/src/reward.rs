//! Per-user rewards as functions of served rate.
//!
//! The delay-QoS reward credits each served byte with the age of the
//! packet it came from: serving at rate `r` for one subframe drains
//! `r·Δ/8e3` bytes head-of-line first, and the reward is the sum of
//! (bytes · delay) over what got served. As a function of `r` this is
//! piecewise linear, concave and nondecreasing, with breakpoints where a
//! packet boundary is crossed and slope proportional to the delay of the
//! packet currently being drained.
//!
//! Best-effort users get the classic smoothed utility: the scheduler
//! maintains an exponential average `x` of served rate and the one-shot
//! reward for serving at `r` is `U((1−α)x + αr)/α`, whose derivative
//! `U′((1−α)x + αr)` recovers the gradient scheduler as `α → 0`.

use std::sync::Arc;

use crate::channel_power::{rate_inverse, rate_subdiff, SpectralEfficiency, UeLink};
use crate::{require_finite, Error, Result};

/// One logical packet waiting in a queue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueuedPacket {
    pub bytes: f64,
    pub delay_ms: f64,
}

/// A head-of-line-ordered queue: packets sorted by strictly decreasing
/// delay (oldest first), equal-delay packets merged at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct QosQueue {
    packets: Vec<QueuedPacket>,
    /// prefix[k] = total bytes of the k oldest packets; prefix[0] = 0.
    prefix: Vec<f64>,
    subframe_ms: f64,
}

impl QosQueue {
    pub fn new(packets: Vec<QueuedPacket>, subframe_ms: f64) -> Result<Self> {
        if !(subframe_ms > 0.0) || !subframe_ms.is_finite() {
            return Err(Error::InvalidParameter {
                name: "subframe_ms",
                value: subframe_ms,
            });
        }
        for p in &packets {
            if !(p.bytes > 0.0) || !p.bytes.is_finite() {
                return Err(Error::InvalidPacket(format!(
                    "packet size must be positive, got {}",
                    p.bytes
                )));
            }
            if !(p.delay_ms >= 0.0) || !p.delay_ms.is_finite() {
                return Err(Error::InvalidPacket(format!(
                    "packet delay must be nonnegative, got {}",
                    p.delay_ms
                )));
            }
        }
        let mut packets = packets;
        packets.sort_by(|a, b| b.delay_ms.partial_cmp(&a.delay_ms).unwrap());
        let mut merged: Vec<QueuedPacket> = Vec::with_capacity(packets.len());
        for p in packets {
            match merged.last_mut() {
                Some(last) if last.delay_ms == p.delay_ms => last.bytes += p.bytes,
                _ => merged.push(p),
            }
        }
        let mut prefix = Vec::with_capacity(merged.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for p in &merged {
            acc += p.bytes;
            prefix.push(acc);
        }
        Ok(Self {
            packets: merged,
            prefix,
            subframe_ms,
        })
    }

    pub fn empty(subframe_ms: f64) -> Self {
        Self {
            packets: Vec::new(),
            prefix: vec![0.0],
            subframe_ms,
        }
    }

    /// Re-bucket delays to multiples of `width_ms` (rounding down) and
    /// merge packets that land in the same bucket. Controls the number of
    /// reward pieces when queues hold many distinctly-aged packets.
    pub fn with_delay_buckets(&self, width_ms: f64) -> Result<Self> {
        if !(width_ms > 0.0) {
            return Err(Error::InvalidParameter {
                name: "width_ms",
                value: width_ms,
            });
        }
        let packets = self
            .packets
            .iter()
            .map(|p| QueuedPacket {
                bytes: p.bytes,
                delay_ms: (p.delay_ms / width_ms).floor() * width_ms,
            })
            .collect();
        Self::new(packets, self.subframe_ms)
    }

    /// The queue after `bytes` have been drained head-of-line first.
    /// Delays are unchanged: a partially served packet keeps its age.
    pub fn after_serving(&self, bytes: f64) -> Self {
        let mut remaining = bytes.max(0.0);
        let mut packets = Vec::with_capacity(self.packets.len());
        for p in &self.packets {
            if remaining >= p.bytes {
                remaining -= p.bytes;
            } else {
                packets.push(QueuedPacket {
                    bytes: p.bytes - remaining,
                    delay_ms: p.delay_ms,
                });
                remaining = 0.0;
            }
        }
        Self::new(packets, self.subframe_ms).expect("drained queue stays valid")
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn subframe_ms(&self) -> f64 {
        self.subframe_ms
    }

    pub fn packets(&self) -> &[QueuedPacket] {
        &self.packets
    }

    /// 1-based packet access, oldest first.
    pub fn packet(&self, eta: usize) -> Result<QueuedPacket> {
        if eta == 0 || eta > self.packets.len() {
            return Err(Error::PacketIndex {
                index: eta,
                len: self.packets.len(),
            });
        }
        Ok(self.packets[eta - 1])
    }

    /// Total bytes of the `k` oldest packets (`k = 0` gives 0).
    pub fn prefix_bytes(&self, k: usize) -> Result<f64> {
        self.prefix
            .get(k)
            .copied()
            .ok_or(Error::PacketIndex {
                index: k,
                len: self.packets.len(),
            })
    }

    pub fn total_bytes(&self) -> f64 {
        *self.prefix.last().unwrap()
    }

    /// Bytes drained in one subframe per bit/s of rate.
    pub fn bytes_per_rate_unit(&self) -> f64 {
        self.subframe_ms * 1e-3 / 8.0
    }

    /// Rate in bits/s that drains exactly `bytes` in one subframe.
    pub fn rate_for_bytes(&self, bytes: f64) -> f64 {
        bytes / self.bytes_per_rate_unit()
    }

    /// Head-of-line delay, 0 for an empty queue.
    pub fn hol_delay_ms(&self) -> f64 {
        self.packets.first().map_or(0.0, |p| p.delay_ms)
    }

    /// Index of the last packet fully served at rate `r`, i.e. the largest
    /// k with prefix(k) <= r·Δ/8e3.
    fn served_count(&self, served_bytes: f64) -> usize {
        // prefix is strictly increasing; binary search for the boundary.
        match self
            .prefix
            .binary_search_by(|p| p.partial_cmp(&served_bytes).unwrap())
        {
            Ok(k) => k,
            Err(ins) => ins - 1,
        }
    }

    /// Delay-weighted bytes served in one subframe at rate `r` (byte·ms).
    pub fn reward(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(Error::NegativeRate(r));
        }
        let served = (r * self.bytes_per_rate_unit()).min(self.total_bytes());
        let n = self.served_count(served);
        let mut value = 0.0;
        for p in &self.packets[..n] {
            value += p.bytes * p.delay_ms;
        }
        if n < self.packets.len() {
            value += (served - self.prefix[n]) * self.packets[n].delay_ms;
        }
        Ok(value)
    }

    /// Subdifferential of [`Self::reward`] at `r`, in byte·ms per bit/s.
    ///
    /// A single point strictly inside a piece, the closed interval between
    /// adjacent packet delays at a breakpoint, and `[0, ·]` once the queue
    /// drains within the subframe.
    pub fn reward_subdiff(&self, r: f64) -> Result<(f64, f64)> {
        if !(r >= 0.0) {
            return Err(Error::NegativeRate(r));
        }
        let conv = self.bytes_per_rate_unit();
        if self.packets.is_empty() {
            return Ok((0.0, 0.0));
        }
        let served = r * conv;
        let total = self.total_bytes();
        if served > total {
            return Ok((0.0, 0.0));
        }
        if served == total {
            return Ok((0.0, self.packets.last().unwrap().delay_ms * conv));
        }
        let n = self.served_count(served);
        let next = self.packets[n].delay_ms * conv;
        if served == self.prefix[n] && n > 0 {
            Ok((next, self.packets[n - 1].delay_ms * conv))
        } else {
            Ok((next, next))
        }
    }
}

/// Range of composed subgradients `∂f·∂h` available while packet `eta` is
/// being drained, along with the bandwidths that bracket its service.
#[derive(Debug, Clone, Copy)]
pub struct SgRange {
    pub lo: f64,
    pub hi: f64,
    /// Bandwidth at which packet `eta` starts being served.
    pub b_lo: f64,
    /// Bandwidth at which packet `eta` is fully served.
    pub b_hi: f64,
    /// True if `b_hi` hit the rate-inversion ceiling.
    pub saturated: bool,
    /// The reward slope for this packet: delay · bytes-per-rate-unit.
    /// `lo` and `hi` equal `slope_weight` times a channel slope; callers
    /// composing further products reuse this factor so equal marginal
    /// values stay bit-identical.
    pub slope_weight: f64,
}

/// Composed subgradient range for serving packet `eta` (1-based) of `q`
/// over link `link`: `delay(eta) · [min ∂h(b_hi), min ∂h(b_lo)]` scaled by
/// the byte conversion, where `b_lo`/`b_hi` invert the rates that just
/// start / just finish the packet within one subframe.
pub fn packet_subgradient_range(
    q: &QosQueue,
    link: &UeLink,
    psi: &dyn SpectralEfficiency,
    eta: usize,
) -> Result<SgRange> {
    let p = q.packet(eta)?;
    let conv = q.bytes_per_rate_unit();
    let invert = |r: f64| match rate_inverse(link, psi, r) {
        Ok(b) => Ok((b, false)),
        Err(Error::UnachievableRate { ceiling, .. }) => Ok((ceiling, true)),
        Err(e) => Err(e),
    };
    let (b_lo, _) = invert(q.rate_for_bytes(q.prefix_bytes(eta - 1)?))?;
    let (b_hi, saturated) = invert(q.rate_for_bytes(q.prefix_bytes(eta)?))?;
    let w = p.delay_ms * conv;
    Ok(SgRange {
        lo: w * rate_subdiff(link, psi, b_hi)?.lo,
        hi: w * rate_subdiff(link, psi, b_lo)?.lo,
        b_lo,
        b_hi,
        saturated,
        slope_weight: w,
    })
}

/// Strictly concave increasing utility with derivative.
pub trait Utility: Send + Sync {
    fn eval(&self, x: f64) -> f64;
    fn deriv(&self, x: f64) -> f64;
}

/// Logarithmic (proportional-fair) utility.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogUtility;

impl Utility for LogUtility {
    fn eval(&self, x: f64) -> f64 {
        x.ln()
    }

    fn deriv(&self, x: f64) -> f64 {
        1.0 / x
    }
}

/// Best-effort scheduler state: exponential average of served rate.
#[derive(Clone)]
pub struct BeState {
    pub avg_rate: f64,
    pub alpha: f64,
    pub utility: Arc<dyn Utility>,
}

impl std::fmt::Debug for BeState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BeState")
            .field("avg_rate", &self.avg_rate)
            .field("alpha", &self.alpha)
            .finish()
    }
}

impl BeState {
    pub fn new(avg_rate: f64, alpha: f64, utility: Arc<dyn Utility>) -> Result<Self> {
        require_finite("avg_rate", avg_rate)?;
        if !(avg_rate >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "avg_rate",
                value: avg_rate,
            });
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                value: alpha,
            });
        }
        Ok(Self {
            avg_rate,
            alpha,
            utility,
        })
    }

    fn smoothed(&self, r: f64) -> f64 {
        (1.0 - self.alpha) * self.avg_rate + self.alpha * r
    }

    /// One-subframe reward `U((1−α)x + αr)/α`.
    pub fn reward(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(Error::NegativeRate(r));
        }
        Ok(self.utility.eval(self.smoothed(r)) / self.alpha)
    }

    /// Derivative `U′((1−α)x + αr)`.
    pub fn reward_deriv(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(Error::NegativeRate(r));
        }
        Ok(self.utility.deriv(self.smoothed(r)))
    }

    /// The filter advanced by one subframe in which rate `r` was served.
    pub fn updated(&self, r: f64) -> Self {
        Self {
            avg_rate: self.smoothed(r),
            alpha: self.alpha,
            utility: Arc::clone(&self.utility),
        }
    }
}

/// The reward spec attached to one user in an allocation problem.
#[derive(Debug, Clone)]
pub enum RewardKind {
    /// Delay-weighted byte reward over an aged queue, scaled by `weight`.
    DelayQos { queue: QosQueue, weight: f64 },
    /// Smoothed concave utility of average rate.
    BestEffort(BeState),
    /// Queue-drain reward `Q·s − s²/2` of served bytes `s = r·Δ/8e3`,
    /// clamped at its maximum (queue emptied).
    QueueDrain {
        queue_bytes: f64,
        subframe_ms: f64,
    },
}

impl RewardKind {
    fn drain_conv(subframe_ms: f64) -> f64 {
        subframe_ms * 1e-3 / 8.0
    }

    pub fn reward(&self, r: f64) -> Result<f64> {
        match self {
            RewardKind::DelayQos { queue, weight } => Ok(weight * queue.reward(r)?),
            RewardKind::BestEffort(be) => be.reward(r),
            RewardKind::QueueDrain {
                queue_bytes,
                subframe_ms,
            } => {
                if !(r >= 0.0) {
                    return Err(Error::NegativeRate(r));
                }
                let s = (r * Self::drain_conv(*subframe_ms)).min(*queue_bytes);
                Ok(queue_bytes * s - 0.5 * s * s)
            }
        }
    }

    /// Subdifferential `[lo, hi]` of the reward at rate `r`.
    pub fn subdiff(&self, r: f64) -> Result<(f64, f64)> {
        match self {
            RewardKind::DelayQos { queue, weight } => {
                let (lo, hi) = queue.reward_subdiff(r)?;
                Ok((weight * lo, weight * hi))
            }
            RewardKind::BestEffort(be) => {
                let d = be.reward_deriv(r)?;
                Ok((d, d))
            }
            RewardKind::QueueDrain {
                queue_bytes,
                subframe_ms,
            } => {
                if !(r >= 0.0) {
                    return Err(Error::NegativeRate(r));
                }
                let conv = Self::drain_conv(*subframe_ms);
                let d = (queue_bytes - r * conv).max(0.0) * conv;
                Ok((d, d))
            }
        }
    }

    /// Largest marginal reward at zero rate; the shutdown comparison uses
    /// this with the zero-bandwidth channel slope.
    pub fn max_subdiff_at_zero(&self) -> f64 {
        match self {
            RewardKind::DelayQos { queue, weight } => {
                weight * queue.hol_delay_ms() * queue.bytes_per_rate_unit()
            }
            RewardKind::BestEffort(be) => be.reward_deriv(0.0).unwrap_or(f64::INFINITY),
            RewardKind::QueueDrain {
                queue_bytes,
                subframe_ms,
            } => queue_bytes * Self::drain_conv(*subframe_ms),
        }
    }

    /// True when the reward is differentiable (no packet breakpoints).
    pub fn is_smooth(&self) -> bool {
        !matches!(self, RewardKind::DelayQos { .. })
    }
}
