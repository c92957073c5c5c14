//! Subframe-level uplink simulator tying traffic, HARQ, buffer reporting,
//! queue estimation and scheduling together.
//!
//! Per subframe `u`, in order:
//!
//! 1. traffic arrivals enter UE queues (an empty queue turning nonempty
//!    arms an in-band buffer report)
//! 2. periodic buffer-report arming for reports due this subframe
//! 3. scheduling requests at each UE's opportunity phase, answered by a
//!    small probe grant that reaches the air `grant_delay + 4` subframes
//!    later
//! 4. transmissions granted for `u`: transport blocks are assembled FIFO,
//!    the scheduler-side estimator books its expected dequeue, and the
//!    same blocks are put on hold eight subframes out in case this block
//!    needs a retransmission
//! 5. decodes of transmissions from `u - 4`: corrections of the booked
//!    dequeue, in-band reports, HARQ feedback (retransmissions use the
//!    held blocks; an ACK releases the hold; exhausted blocks return to
//!    the head of the UE queue)
//! 6. scheduling for `u + 4` over the blocks still free there
//! 7. diagnostics
//!
//! Within a subframe every per-user loop runs in user-index order and all
//! randomness comes from per-user counter-mode streams, so runs are
//! bit-identical for a given (config, seed).

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ulsched_core::channel_power::{rate_inverse, Shannon, SpectralEfficiency};
use ulsched_core::delay_estimator::QueueEstimator;
use ulsched_core::Error;

use crate::channel::{draw_channel, UeChannel};
use crate::config::{
    SchedulerKind, SimConfig, TrafficClass, DECODE_DELAY, GRANT_DELAY, HARQ_PERIOD, RB_HZ,
    SUBFRAME_MS,
};
use crate::grants::{map_grants, tb_capacity_bytes, RbMap};
use crate::metrics::{summarize, PacketRecord, SummaryRow};
use crate::schedulers::{bandwidth_demands, SchedulerInput};
use crate::traffic::{streaming_base_rate_bps, TrafficSource};

/// Bytes offered per subframe by a calibration source, above any single
/// user's per-subframe ceiling so full-buffer users never drain.
const FULL_BUFFER_CHUNK_BYTES: f64 = 20_000.0;

#[derive(Debug, Clone, Copy)]
struct Slice {
    pkt: usize,
    bytes: f64,
}

struct PacketMeta {
    arrival_sf: u64,
    bytes: f64,
    remaining: f64,
}

struct UeState {
    channel: UeChannel,
    class: TrafficClass,
    weight: f64,
    source: TrafficSource,
    queue: VecDeque<Slice>,
    queue_bytes: f64,
    bsr_armed: bool,
    estimator: QueueEstimator,
    harq_rng: ChaCha8Rng,
    pending_first_grants: usize,
}

#[derive(Clone, Copy)]
enum GrantKind {
    First,
    Retx(usize),
}

struct Grant {
    ue: u16,
    rb_start: usize,
    rb_count: usize,
    capacity: f64,
    kind: GrantKind,
}

struct Tb {
    ue: u16,
    /// First-transmission subframe; also the report generation time.
    gen_sf: u64,
    attempts: usize,
    rb_start: usize,
    rb_count: usize,
    booked: f64,
    payload: Vec<Slice>,
    payload_bytes: f64,
    bsr_value: Option<f64>,
}

struct Plan {
    map: RbMap,
    grants: Vec<Grant>,
}

impl Plan {
    fn new(n_rbs: usize) -> Self {
        Self {
            map: RbMap::new(n_rbs),
            grants: Vec::new(),
        }
    }
}

/// One scheduled transmission, for diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct GrantLogEntry {
    pub sf: u64,
    pub ue: u16,
    pub rb_start: usize,
    pub rb_count: usize,
    /// First transmission subframe when this is a retransmission.
    pub retx_of: Option<u64>,
}

/// Per-subframe truth-vs-estimate sample for one user with a nonempty
/// queue.
#[derive(Debug, Clone, Copy)]
pub struct HolSample {
    pub sf: u64,
    pub ue: u16,
    pub true_hol_ms: f64,
    pub est_hol_ms: Option<f64>,
}

/// Extra traces collected when `config.diag` is set.
#[derive(Default)]
pub struct Diag {
    pub hol_samples: Vec<HolSample>,
    pub grant_log: Vec<GrantLogEntry>,
    /// Per user: true packet arrivals by subframe.
    pub true_arrivals: Vec<BTreeMap<u64, f64>>,
    /// Per user: arrival bytes the estimator attributed, by generation.
    pub attributed_arrivals: Vec<BTreeMap<u64, f64>>,
}

pub struct SimResult {
    pub scheduler: SchedulerKind,
    pub seed: u64,
    pub packets: Vec<PacketRecord>,
    /// Delay statistics over packets arriving after the warmup window.
    pub summary: Vec<SummaryRow>,
    pub arrived_bytes: f64,
    pub delivered_bytes: f64,
    pub delivered_per_ue: Vec<f64>,
    pub queued_bytes_end: f64,
    pub inflight_bytes_end: f64,
    pub stale_reports: u64,
    pub diag: Option<Diag>,
}

fn stream_rng(seed: u64, ue: usize, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((ue as u64) << 2 | lane);
    rng
}

/// Blocks needed to carry `bytes` in one subframe, clamped to the cell.
fn blocks_for_bytes(
    channel: &UeChannel,
    psi: &dyn SpectralEfficiency,
    bytes: f64,
    n_rbs: usize,
) -> usize {
    let rate_needed = bytes * 8.0 / (SUBFRAME_MS * 1e-3);
    match rate_inverse(&channel.link, psi, rate_needed) {
        Ok(b) => ((b / RB_HZ).ceil() as usize).clamp(1, n_rbs),
        Err(Error::UnachievableRate { .. }) => n_rbs,
        Err(e) => panic!("rate inversion failed: {e}"),
    }
}

/// Per-user packet-size scale factors for streaming sources. Fixed-rate
/// mode draws a mean rate per user; adaptive mode measures what each
/// user's link can carry in a full-buffer calibration run and sizes the
/// source to a fraction of that.
fn streaming_scales(config: &SimConfig, seed: u64, channels: &[UeChannel]) -> Vec<f64> {
    let n = config.n_ues();
    let s = &config.traffic.streaming;
    let base = streaming_base_rate_bps(s);
    if let Some((lo, hi)) = s.mean_rate_range_bps {
        return (0..n)
            .map(|ue| {
                if config.class_of(ue) != TrafficClass::Streaming {
                    return 1.0;
                }
                let rate = if hi > lo {
                    stream_rng(seed, ue, 3).gen_range(lo..hi)
                } else {
                    lo
                };
                rate / base
            })
            .collect();
    }
    if let Some(fraction) = s.load_fraction {
        let mut cal = config.clone();
        cal.duration_subframes = config.traffic.calibration_subframes;
        cal.warmup_subframes = 0;
        cal.diag = false;
        let ones = vec![1.0; n];
        let measured = run_sim(&cal, seed, channels, &ones, true);
        let secs = cal.duration_subframes as f64 * SUBFRAME_MS * 1e-3;
        return (0..n)
            .map(|ue| {
                if config.class_of(ue) != TrafficClass::Streaming {
                    return 1.0;
                }
                let bps = measured.delivered_per_ue[ue] * 8.0 / secs;
                (fraction * bps / base).max(1e-9)
            })
            .collect();
    }
    vec![s.size_scale; n]
}

/// Calibration-phase allocation: an equal split of the free band over
/// all backlogged users, with the remainder RBs rotated so long-run
/// shares stay even. A contention scheduler would be winner-take-all
/// under full-buffer queues and measure one user at the whole cell
/// rate and everyone else near zero.
fn equal_split_demands(ues: &[UeState], budget_hz: f64, rotate: usize) -> Vec<(u16, f64)> {
    let mut active: Vec<u16> = ues
        .iter()
        .enumerate()
        .filter(|(_, ue)| ue.queue_bytes > 0.0)
        .map(|(idx, _)| idx as u16)
        .collect();
    if active.is_empty() {
        return Vec::new();
    }
    // Rotating the order keeps the remainder RBs and any grant-count
    // truncation from always favoring low ids.
    let shift = rotate % active.len();
    active.rotate_left(shift);
    let free_rbs = (budget_hz / RB_HZ).round() as usize;
    let base = free_rbs / active.len();
    let extra = free_rbs % active.len();
    (0..active.len())
        .map(|i| {
            let rbs = base + usize::from(i < extra);
            (active[i], rbs as f64 * RB_HZ)
        })
        .filter(|&(_, bw)| bw > 0.0)
        .collect()
}

pub fn run(config: &SimConfig) -> SimResult {
    run_with_seed(config, config.seed)
}

pub fn run_with_seed(config: &SimConfig, seed: u64) -> SimResult {
    config.validate().expect("invalid simulation config");
    let n = config.n_ues();
    let mut channel_rng = stream_rng(seed, 0, 0);
    let channels: Vec<UeChannel> = (0..n)
        .map(|_| draw_channel(&config.cell, &config.power, &mut channel_rng))
        .collect();
    let scales = streaming_scales(config, seed, &channels);
    run_sim(config, seed, &channels, &scales, false)
}

fn run_sim(
    config: &SimConfig,
    seed: u64,
    channels: &[UeChannel],
    scales: &[f64],
    full_buffer: bool,
) -> SimResult {
    let psi: Arc<dyn SpectralEfficiency> = Arc::new(Shannon);
    let n = config.n_ues();
    let mut ues: Vec<UeState> = (0..n)
        .map(|ue| {
            let class = config.class_of(ue);
            let source = match class {
                TrafficClass::LiveVideo => {
                    TrafficSource::live_video(&config.traffic.live_video, stream_rng(seed, ue, 1))
                }
                TrafficClass::Streaming if full_buffer => {
                    TrafficSource::full_buffer(FULL_BUFFER_CHUNK_BYTES, stream_rng(seed, ue, 1))
                }
                TrafficClass::Streaming => {
                    let mut scaled = config.traffic.streaming.clone();
                    scaled.size_scale = scales[ue];
                    TrafficSource::streaming(&scaled, stream_rng(seed, ue, 1))
                }
            };
            UeState {
                channel: channels[ue],
                class,
                weight: match class {
                    TrafficClass::LiveVideo => config.weights.live_video_weight,
                    TrafficClass::Streaming => 1.0,
                },
                source,
                queue: VecDeque::new(),
                queue_bytes: 0.0,
                bsr_armed: false,
                estimator: QueueEstimator::new(),
                harq_rng: stream_rng(seed, ue, 2),
                pending_first_grants: 0,
            }
        })
        .collect();

    let mut metas: Vec<PacketMeta> = Vec::new();
    let mut pkt_class: Vec<(u16, TrafficClass)> = Vec::new();
    let mut tbs: Vec<Tb> = Vec::new();
    let mut plans: BTreeMap<u64, Plan> = BTreeMap::new();
    let mut decode_due: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut ideal_reports: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut packets: Vec<PacketRecord> = Vec::new();
    let mut diag = config.diag.then(|| Diag {
        true_arrivals: vec![BTreeMap::new(); n],
        attributed_arrivals: vec![BTreeMap::new(); n],
        ..Diag::default()
    });
    let (mut arrived_bytes, mut delivered_bytes, mut inflight_bytes) = (0.0, 0.0, 0.0);
    let mut delivered_per_ue = vec![0.0f64; n];
    let max_attempts = config.harq.decode_probs.len();

    for u in 0..config.duration_subframes {
        // 1. Traffic arrivals.
        for (idx, ue) in ues.iter_mut().enumerate() {
            let was_empty = ue.queue_bytes == 0.0;
            for bytes in ue.source.poll(u) {
                let pkt = metas.len();
                metas.push(PacketMeta {
                    arrival_sf: u,
                    bytes,
                    remaining: bytes,
                });
                pkt_class.push((idx as u16, ue.class));
                ue.queue.push_back(Slice { pkt, bytes });
                ue.queue_bytes += bytes;
                arrived_bytes += bytes;
                if let Some(d) = diag.as_mut() {
                    *d.true_arrivals[idx].entry(u).or_insert(0.0) += bytes;
                }
            }
            if was_empty && ue.queue_bytes > 0.0 {
                ue.bsr_armed = true;
            }
        }

        // 2. Periodic report arming, due this subframe.
        if !config.bsr.ideal {
            for (idx, ue) in ues.iter_mut().enumerate() {
                if u % config.bsr.period_subframes == idx as u64 % config.bsr.period_subframes
                    && ue.queue_bytes > 0.0
                {
                    ue.bsr_armed = true;
                }
            }
        }

        // 3. Scheduling requests and probe grants. A request fires when a
        // buffer report is pending with no first-transmission grant to
        // carry it; retransmissions in flight do not suppress it.
        for idx in 0..n {
            let ue = &mut ues[idx];
            let phase = idx as u64 % config.sr.period_subframes;
            if u % config.sr.period_subframes != phase
                || ue.queue_bytes <= 0.0
                || !ue.bsr_armed
                || ue.pending_first_grants > 0
            {
                continue;
            }
            ue.estimator.on_sr(u);
            // The request takes `grant_delay` subframes to turn into a
            // grant, which takes effect four subframes after that.
            let target = u + config.sr.grant_delay_subframes + GRANT_DELAY;
            let rbs = blocks_for_bytes(
                &ue.channel,
                psi.as_ref(),
                config.sr.probe_bytes,
                config.cell.n_rbs,
            );
            let plan = plans
                .entry(target)
                .or_insert_with(|| Plan::new(config.cell.n_rbs));
            if let Some((start, count)) = plan.map.place(idx as u16, rbs) {
                let capacity = tb_capacity_bytes(&ue.channel.link, psi.as_ref(), count);
                plan.grants.push(Grant {
                    ue: idx as u16,
                    rb_start: start,
                    rb_count: count,
                    capacity,
                    kind: GrantKind::First,
                });
                ue.pending_first_grants += 1;
            }
        }

        // 4. Transmissions granted for this subframe.
        if let Some(plan) = plans.remove(&u) {
            for grant in plan.grants {
                let idx = grant.ue as usize;
                let ue = &mut ues[idx];
                let attempts = match grant.kind {
                    GrantKind::First => {
                        let mut payload = Vec::new();
                        let mut payload_bytes = 0.0;
                        while payload_bytes < grant.capacity {
                            let Some(front) = ue.queue.front_mut() else {
                                break;
                            };
                            let room = grant.capacity - payload_bytes;
                            if front.bytes <= room {
                                payload_bytes += front.bytes;
                                payload.push(ue.queue.pop_front().expect("nonempty"));
                            } else {
                                payload.push(Slice {
                                    pkt: front.pkt,
                                    bytes: room,
                                });
                                front.bytes -= room;
                                payload_bytes += room;
                                break;
                            }
                        }
                        ue.queue_bytes -= payload_bytes;
                        inflight_bytes += payload_bytes;
                        ue.pending_first_grants = ue.pending_first_grants.saturating_sub(1);
                        let booked = ue
                            .estimator
                            .estimated_queue()
                            .max(0.0)
                            .min(grant.capacity);
                        if booked > 0.0 {
                            ue.estimator.on_scheduled(u, booked).expect("valid event");
                        }
                        let bsr_value = (!config.bsr.ideal && ue.bsr_armed).then(|| {
                            ue.bsr_armed = false;
                            ue.queue_bytes
                        });
                        let tb = Tb {
                            ue: grant.ue,
                            gen_sf: u,
                            attempts: 1,
                            rb_start: grant.rb_start,
                            rb_count: grant.rb_count,
                            booked,
                            payload,
                            payload_bytes,
                            bsr_value,
                        };
                        decode_due.entry(u + DECODE_DELAY).or_default().push(tbs.len());
                        if let Some(d) = diag.as_mut() {
                            d.grant_log.push(GrantLogEntry {
                                sf: u,
                                ue: grant.ue,
                                rb_start: grant.rb_start,
                                rb_count: grant.rb_count,
                                retx_of: None,
                            });
                        }
                        tbs.push(tb);
                        1
                    }
                    GrantKind::Retx(tb_idx) => {
                        tbs[tb_idx].attempts += 1;
                        decode_due.entry(u + DECODE_DELAY).or_default().push(tb_idx);
                        if let Some(d) = diag.as_mut() {
                            d.grant_log.push(GrantLogEntry {
                                sf: u,
                                ue: grant.ue,
                                rb_start: grant.rb_start,
                                rb_count: grant.rb_count,
                                retx_of: Some(tbs[tb_idx].gen_sf),
                            });
                        }
                        tbs[tb_idx].attempts
                    }
                };
                // Hold the same blocks one HARQ period out while another
                // attempt is still possible; an ACK releases the hold
                // before that subframe is scheduled.
                if attempts < max_attempts {
                    plans
                        .entry(u + HARQ_PERIOD)
                        .or_insert_with(|| Plan::new(config.cell.n_rbs))
                        .map
                        .claim(grant.ue, grant.rb_start, grant.rb_count);
                }
            }
        }
        if config.bsr.ideal {
            ideal_reports.insert(u, ues.iter().map(|ue| ue.queue_bytes).collect());
        }

        // 5. Decodes of transmissions from four subframes ago.
        if let Some(due) = decode_due.remove(&u) {
            for tb_idx in due {
                let tb = &mut tbs[tb_idx];
                let idx = tb.ue as usize;
                let ue = &mut ues[idx];
                let retx_target = u + HARQ_PERIOD - DECODE_DELAY;
                let p = config.harq.decode_probs[tb.attempts - 1];
                if ue.harq_rng.gen::<f64>() < p {
                    if tb.attempts < max_attempts {
                        plans
                            .get_mut(&retx_target)
                            .expect("hold placed at transmission")
                            .map
                            .release(tb.ue, tb.rb_start, tb.rb_count);
                    }
                    // Correct the booked dequeue to the actual payload.
                    let over = tb.booked - tb.payload_bytes;
                    if over > 0.0 {
                        ue.estimator.on_failed(tb.gen_sf, over).expect("valid event");
                    } else if over < 0.0 {
                        ue.estimator
                            .on_scheduled(tb.gen_sf, -over)
                            .expect("valid event");
                    }
                    if let Some(value) = tb.bsr_value {
                        let update = ue
                            .estimator
                            .on_bsr(value, u, u - tb.gen_sf)
                            .expect("valid report");
                        if let (Some(d), Some(up)) = (diag.as_mut(), update) {
                            *d.attributed_arrivals[idx].entry(up.gen).or_insert(0.0) +=
                                up.attributed_bytes;
                        }
                    }
                    for slice in tb.payload.drain(..) {
                        let meta = &mut metas[slice.pkt];
                        meta.remaining -= slice.bytes;
                        delivered_bytes += slice.bytes;
                        if meta.remaining <= 0.0 {
                            let (owner, class) = pkt_class[slice.pkt];
                            // Departure is the decode subframe, so delay
                            // includes the air pipeline: at least 4 ms.
                            packets.push(PacketRecord {
                                ue: owner,
                                class,
                                arrival_sf: meta.arrival_sf,
                                departure_sf: u,
                                bytes: meta.bytes,
                            });
                        }
                    }
                    inflight_bytes -= tb.payload_bytes;
                    delivered_per_ue[idx] += tb.payload_bytes;
                } else if tb.attempts < max_attempts {
                    // Synchronous retransmission on the blocks held since
                    // the previous attempt.
                    let plan = plans
                        .get_mut(&retx_target)
                        .expect("hold placed at transmission");
                    plan.grants.push(Grant {
                        ue: tb.ue,
                        rb_start: tb.rb_start,
                        rb_count: tb.rb_count,
                        capacity: 0.0,
                        kind: GrantKind::Retx(tb_idx),
                    });
                } else {
                    // Out of attempts: what was booked never left.
                    if tb.booked > 0.0 {
                        ue.estimator
                            .on_failed(tb.gen_sf, tb.booked)
                            .expect("valid event");
                    }
                    let was_empty = ue.queue_bytes == 0.0;
                    for slice in tb.payload.drain(..).rev() {
                        ue.queue_bytes += slice.bytes;
                        ue.queue.push_front(slice);
                    }
                    inflight_bytes -= tb.payload_bytes;
                    if was_empty && ue.queue_bytes > 0.0 {
                        ue.bsr_armed = true;
                    }
                }
            }
        }
        if config.bsr.ideal && u >= DECODE_DELAY {
            if let Some(values) = ideal_reports.remove(&(u - DECODE_DELAY)) {
                for (idx, ue) in ues.iter_mut().enumerate() {
                    let update = ue
                        .estimator
                        .on_bsr(values[idx], u, DECODE_DELAY)
                        .expect("valid report");
                    if let (Some(d), Some(up)) = (diag.as_mut(), update) {
                        *d.attributed_arrivals[idx].entry(up.gen).or_insert(0.0) +=
                            up.attributed_bytes;
                    }
                }
            }
        }

        // 6. Scheduling for u + GRANT_DELAY.
        let target = u + GRANT_DELAY;
        if target < config.duration_subframes {
            let plan = plans
                .entry(target)
                .or_insert_with(|| Plan::new(config.cell.n_rbs));
            let budget = plan.map.free_count() as f64 * RB_HZ;
            let demands = if full_buffer {
                for ue in ues.iter_mut() {
                    ue.estimator.advance_to(u);
                }
                equal_split_demands(&ues, budget, u as usize)
            } else {
                let mut inputs = Vec::new();
                for (idx, ue) in ues.iter_mut().enumerate() {
                    ue.estimator.advance_to(u);
                    let snap = ue
                        .estimator
                        .snapshot_packets(SUBFRAME_MS)
                        .expect("consistent estimator");
                    if snap.is_empty() {
                        continue;
                    }
                    // Every not-yet-transmitted first grant will drain queue
                    // the estimator still sees.
                    let outstanding: f64 = plans
                        .range(u + 1..)
                        .flat_map(|(_, p)| p.grants.iter())
                        .filter(|g| g.ue as usize == idx && matches!(g.kind, GrantKind::First))
                        .map(|g| g.capacity)
                        .sum();
                    let projected = snap.after_serving(outstanding);
                    if projected.is_empty() {
                        continue;
                    }
                    inputs.push(SchedulerInput {
                        ue: idx as u16,
                        link: ue.channel.link,
                        queue: projected,
                        weight: ue.weight,
                    });
                }
                bandwidth_demands(config.scheduler, &inputs, budget, &psi)
            };
            let plan = plans.get_mut(&target).expect("just inserted");
            for (ue, start, count) in map_grants(&mut plan.map, &demands, config.max_new_grants) {
                let capacity =
                    tb_capacity_bytes(&ues[ue as usize].channel.link, psi.as_ref(), count);
                plan.grants.push(Grant {
                    ue,
                    rb_start: start,
                    rb_count: count,
                    capacity,
                    kind: GrantKind::First,
                });
                ues[ue as usize].pending_first_grants += 1;
            }
        }

        // 7. Diagnostics.
        if let Some(d) = diag.as_mut() {
            for (idx, ue) in ues.iter().enumerate() {
                if let Some(front) = ue.queue.front() {
                    d.hol_samples.push(HolSample {
                        sf: u,
                        ue: idx as u16,
                        true_hol_ms: (u - metas[front.pkt].arrival_sf) as f64,
                        est_hol_ms: ue.estimator.hol_delay_ms(SUBFRAME_MS),
                    });
                }
            }
            let queued: f64 = ues.iter().map(|ue| ue.queue_bytes).sum();
            assert_eq!(
                arrived_bytes,
                delivered_bytes + queued + inflight_bytes,
                "byte conservation broke at subframe {u}"
            );
        }
    }

    let queued_bytes_end: f64 = ues.iter().map(|ue| ue.queue_bytes).sum();
    let warm: Vec<PacketRecord> = packets
        .iter()
        .filter(|p| p.arrival_sf >= config.warmup_subframes)
        .copied()
        .collect();
    let summary = summarize(config.scheduler.name(), &warm);
    SimResult {
        scheduler: config.scheduler,
        seed,
        packets,
        summary,
        arrived_bytes,
        delivered_bytes,
        delivered_per_ue,
        queued_bytes_end,
        inflight_bytes_end: inflight_bytes,
        stale_reports: ues.iter().map(|ue| ue.estimator.stale_report_count()).sum(),
        diag,
    }
}
