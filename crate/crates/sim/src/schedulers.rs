//! Scheduling policies mapping per-user queue views to bandwidth demands
//! for one target subframe.

use std::sync::Arc;

use ulsched_core::channel_power::{rate_inverse, SpectralEfficiency, UeLink};
use ulsched_core::flat_alloc::{allocate, AllocProblem, FlatUser};
use ulsched_core::reward::{QosQueue, RewardKind};
use ulsched_core::Error;

use crate::config::{SchedulerKind, RB_HZ};

/// One user's view offered to the scheduler.
pub struct SchedulerInput {
    pub ue: u16,
    pub link: UeLink,
    /// Estimated queue projected past already-issued grants.
    pub queue: QosQueue,
    pub weight: f64,
}

/// Priority for placing a user's grant onto blocks when not everyone
/// fits: marginal reward of the first bit times the link's spectral
/// efficiency, so high-value urgent traffic on good channels lands first.
fn placement_rank(kind: SchedulerKind, input: &SchedulerInput) -> f64 {
    let eff = (1.0 + input.link.psd_sinr()).log2();
    let value = match kind {
        SchedulerKind::Hol => input.weight * input.queue.hol_delay_ms(),
        SchedulerKind::Queue | SchedulerKind::MaxWeight => input.queue.total_bytes(),
    };
    value * eff
}

/// Bandwidth demand per user (Hz) for the target subframe, ordered by
/// descending placement priority. Demands are later rounded onto whole
/// resource blocks, so they sum to at most `budget_hz`.
pub fn bandwidth_demands(
    kind: SchedulerKind,
    inputs: &[SchedulerInput],
    budget_hz: f64,
    psi: &Arc<dyn SpectralEfficiency>,
) -> Vec<(u16, f64)> {
    if inputs.is_empty() || budget_hz < RB_HZ {
        return Vec::new();
    }
    let mut demands = match kind {
        SchedulerKind::Hol | SchedulerKind::Queue => {
            let users = inputs
                .iter()
                .map(|i| FlatUser {
                    link: i.link,
                    reward: match kind {
                        SchedulerKind::Hol => RewardKind::DelayQos {
                            queue: i.queue.clone(),
                            weight: i.weight,
                        },
                        _ => RewardKind::QueueDrain {
                            queue_bytes: i.queue.total_bytes(),
                            subframe_ms: i.queue.subframe_ms(),
                        },
                    },
                    max_bandwidth: None,
                })
                .collect();
            let problem = match AllocProblem::new(users, budget_hz, Arc::clone(psi)) {
                Ok(p) => p,
                Err(_) => return Vec::new(),
            };
            match allocate(&problem) {
                Ok(a) => inputs
                    .iter()
                    .zip(a.bandwidth)
                    .filter(|(_, b)| *b > 0.0)
                    .map(|(i, b)| (i.ue, b))
                    .collect(),
                // Nothing to send anywhere.
                Err(Error::EmptyProblem) => Vec::new(),
                Err(e) => panic!("allocator failed: {e}"),
            }
        }
        SchedulerKind::MaxWeight => max_weight_demands(inputs, budget_hz, psi.as_ref()),
    };
    let rank: std::collections::HashMap<u16, f64> = inputs
        .iter()
        .map(|i| (i.ue, placement_rank(kind, i)))
        .collect();
    demands.sort_by(|a, b| rank[&b.0].total_cmp(&rank[&a.0]).then(a.0.cmp(&b.0)));
    demands
}

/// Single-pass greedy: rank users once by estimated bytes times the
/// first-block spectral efficiency, then in that order give each user
/// bandwidth until its queue would drain or it hits its power limit,
/// with no re-ranking in between.
fn max_weight_demands(
    inputs: &[SchedulerInput],
    budget_hz: f64,
    psi: &dyn SpectralEfficiency,
) -> Vec<(u16, f64)> {
    let mut order: Vec<usize> = (0..inputs.len())
        .filter(|&i| inputs[i].queue.total_bytes() > 0.0)
        .collect();
    order.sort_by(|&a, &b| {
        let key = |i: &SchedulerInput| {
            i.queue.total_bytes() * (1.0 + i.link.psd_sinr()).log2()
        };
        key(&inputs[b]).total_cmp(&key(&inputs[a]))
    });
    let mut left = budget_hz;
    let mut out = Vec::new();
    for i in order {
        if left < RB_HZ {
            break;
        }
        let input = &inputs[i];
        let q = &input.queue;
        let drain_rate = q.total_bytes() * 8.0 / (q.subframe_ms() * 1e-3);
        let drain_bw = match rate_inverse(&input.link, psi, drain_rate) {
            Ok(b) => b,
            // Beyond the power limit extra bandwidth is nearly free of
            // rate, so the queue cannot be drained this subframe.
            Err(Error::UnachievableRate { .. }) => f64::INFINITY,
            Err(e) => panic!("rate inversion failed: {e}"),
        };
        let want = drain_bw
            .min(input.link.power_limit_bw())
            .max(RB_HZ)
            .min(left);
        out.push((input.ue, want));
        left -= want;
    }
    out
}
