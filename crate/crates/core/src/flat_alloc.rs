//! Frequency-flat bandwidth allocation across users sharing one carrier.
//!
//! Maximizes the sum of concave per-user rewards f_i(h_i(b_i)) subject to
//! a total-bandwidth budget and per-user caps, by bisection on the dual
//! bandwidth price λ. Each inner solve binary-searches the user's packet
//! subgradient ranges, pins the answer at a reward breakpoint or at the
//! power kink when λ lies in the corresponding subdifferential, and only
//! falls back to a bandwidth bisection on strictly curved pieces.
//!
//! Plain dual bisection stalls on piecewise-linear rewards because the
//! demand curve jumps over the budget instead of crossing it. Two exits
//! deal with this:
//! * if a probe λ admits optimal-bandwidth intervals whose sums straddle
//!   the budget, interpolating inside the intervals is exactly optimal;
//! * after each bound update, the convex combination of the two bracket
//!   allocations is tested against the common-price optimality condition
//!   (every active user's marginal-value interval shares a point that no
//!   idle user's activation threshold exceeds). Success certifies the
//!   combination as optimal without driving the dual width to zero.

use std::sync::Arc;

use crate::channel_power::{rate, rate_inverse, rate_subdiff, SpectralEfficiency, UeLink};
use crate::reward::{packet_subgradient_range, RewardKind, SgRange};
use crate::{require_finite, Error, Result};

/// Solver tolerances and iteration caps.
#[derive(Debug, Clone, Copy)]
pub struct AllocConfig {
    /// Stop the dual bisection once (λ_hi − λ_lo) ≤ this × initial λ_hi.
    pub dual_rel_tol: f64,
    /// Bandwidth resolution for inner bisections and feasibility slack.
    pub bandwidth_tol: f64,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
}

impl Default for AllocConfig {
    fn default() -> Self {
        Self {
            dual_rel_tol: 1e-6,
            bandwidth_tol: 1.0,
            max_outer_iters: 25,
            max_inner_iters: 60,
        }
    }
}

/// One user in a flat allocation problem.
#[derive(Debug, Clone)]
pub struct FlatUser {
    pub link: UeLink,
    pub reward: RewardKind,
    /// Optional hard cap (e.g. the bandwidth that drains the estimated
    /// queue in one subframe); `None` means only the budget caps.
    pub max_bandwidth: Option<f64>,
}

/// Inputs of one per-subframe allocation.
#[derive(Clone)]
pub struct AllocProblem {
    pub users: Vec<FlatUser>,
    pub total_bandwidth: f64,
    pub psi: Arc<dyn SpectralEfficiency>,
    pub config: AllocConfig,
}

impl AllocProblem {
    pub fn new(
        users: Vec<FlatUser>,
        total_bandwidth: f64,
        psi: Arc<dyn SpectralEfficiency>,
    ) -> Result<Self> {
        if !(total_bandwidth > 0.0) || !total_bandwidth.is_finite() {
            return Err(Error::InvalidParameter {
                name: "total_bandwidth",
                value: total_bandwidth,
            });
        }
        for u in &users {
            if let Some(m) = u.max_bandwidth {
                if !(m >= 0.0) || !m.is_finite() {
                    return Err(Error::InvalidParameter {
                        name: "max_bandwidth",
                        value: m,
                    });
                }
            }
        }
        Ok(Self {
            users,
            total_bandwidth,
            psi,
            config: AllocConfig::default(),
        })
    }

    pub fn with_config(mut self, config: AllocConfig) -> Self {
        self.config = config;
        self
    }
}

/// Instrumentation from one `allocate` call.
#[derive(Debug, Clone, Default)]
pub struct SolveStats {
    /// Dual bisection steps taken.
    pub iterations: usize,
    /// True when the common-price certificate ended the search.
    pub certified: bool,
    /// True when a probe's optimal intervals straddled the budget.
    pub straddle_exit: bool,
    /// True when the analytic dual lower bound had to be discarded.
    pub bracket_fallback: bool,
    pub locate_calls: usize,
    /// Largest number of packet-range lookups in any single inner solve.
    pub max_sg_accesses_per_locate: usize,
    /// Rate inversions performed (each packet range costs two, once).
    pub rate_inversions: usize,
}

/// Result of one allocation.
#[derive(Debug, Clone)]
pub struct Allocation {
    pub bandwidth: Vec<f64>,
    pub rates: Vec<f64>,
    pub rewards: Vec<f64>,
    pub objective: f64,
    /// Bandwidth price at exit (exact at certified/straddle exits).
    pub dual: f64,
    pub dual_interval: (f64, f64),
    /// Unused budget, ≥ −bandwidth_tol·N.
    pub slack: f64,
    pub stats: SolveStats,
}

/// Bandwidth that drains `queue_bytes` in one subframe, with a flag when
/// the rate-inversion ceiling truncates the answer.
#[derive(Debug, Clone, Copy)]
pub struct BMax {
    pub bandwidth: f64,
    pub saturated: bool,
}

/// Smallest bandwidth whose rate serves `queue_bytes` within one
/// subframe of `subframe_ms`.
pub fn compute_b_max(
    link: &UeLink,
    psi: &dyn SpectralEfficiency,
    queue_bytes: f64,
    subframe_ms: f64,
) -> Result<BMax> {
    if !(queue_bytes >= 0.0) || !queue_bytes.is_finite() {
        return Err(Error::InvalidParameter {
            name: "queue_bytes",
            value: queue_bytes,
        });
    }
    if !(subframe_ms > 0.0) {
        return Err(Error::InvalidParameter {
            name: "subframe_ms",
            value: subframe_ms,
        });
    }
    let drain_rate = queue_bytes * 8.0 / (subframe_ms * 1e-3);
    match rate_inverse(link, psi, drain_rate) {
        Ok(b) => Ok(BMax {
            bandwidth: b,
            saturated: false,
        }),
        Err(Error::UnachievableRate { ceiling, .. }) => Ok(BMax {
            bandwidth: ceiling,
            saturated: true,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy)]
struct Interval {
    lo: f64,
    hi: f64,
}

/// Per-user inner solver. Packet subgradient ranges are memoized for the
/// lifetime of one `allocate` call, so repeated probes at different λ
/// never re-invert the same prefix rate.
struct UserSolver<'a> {
    link: &'a UeLink,
    psi: &'a dyn SpectralEfficiency,
    reward: &'a RewardKind,
    cap: f64,
    /// Ranges scaled by the user weight, lazily filled.
    ranges: Vec<Option<SgRange>>,
    weight: f64,
    shutdown: f64,
    bw_tol: f64,
    max_inner: usize,
    sg_accesses: usize,
    max_sg_accesses: usize,
    locate_calls: usize,
    rate_inversions: usize,
}

impl<'a> UserSolver<'a> {
    fn new(
        user: &'a FlatUser,
        psi: &'a dyn SpectralEfficiency,
        budget: f64,
        config: &AllocConfig,
    ) -> Result<Self> {
        let cap = user.max_bandwidth.unwrap_or(f64::INFINITY).min(budget);
        let (n_packets, weight) = match &user.reward {
            RewardKind::DelayQos { queue, weight } => (queue.len(), *weight),
            _ => (0, 1.0),
        };
        let mut s = Self {
            link: &user.link,
            psi,
            reward: &user.reward,
            cap,
            ranges: vec![None; n_packets],
            weight,
            shutdown: 0.0,
            bw_tol: config.bandwidth_tol,
            max_inner: config.max_inner_iters,
            sg_accesses: 0,
            max_sg_accesses: 0,
            locate_calls: 0,
            rate_inversions: 0,
        };
        // The activation threshold must be the exact float the packet
        // search compares against, so derive it from range(1) when the
        // reward is piecewise.
        s.shutdown = if n_packets > 0 {
            s.range(1)?.hi
        } else {
            s.reward.max_subdiff_at_zero() * rate_subdiff(s.link, psi, 0.0)?.hi
        };
        require_finite("activation threshold", s.shutdown)?;
        Ok(s)
    }

    fn n_packets(&self) -> usize {
        self.ranges.len()
    }

    fn range(&mut self, eta: usize) -> Result<SgRange> {
        self.sg_accesses += 1;
        if let Some(r) = self.ranges[eta - 1] {
            return Ok(r);
        }
        let (queue, _) = match self.reward {
            RewardKind::DelayQos { queue, weight } => (queue, weight),
            _ => unreachable!("packet ranges only exist for queued rewards"),
        };
        let mut r = packet_subgradient_range(queue, self.link, self.psi, eta)?;
        self.rate_inversions += 2;
        r.lo *= self.weight;
        r.hi *= self.weight;
        r.slope_weight *= self.weight;
        self.ranges[eta - 1] = Some(r);
        Ok(r)
    }

    /// Bandwidth past which the reward stops growing, clamped to the cap.
    fn satiation(&mut self) -> Result<f64> {
        let b = match self.reward {
            RewardKind::DelayQos { .. } => {
                if self.n_packets() == 0 {
                    0.0
                } else {
                    self.range(self.n_packets())?.b_hi
                }
            }
            RewardKind::QueueDrain {
                queue_bytes,
                subframe_ms,
            } => compute_b_max(self.link, self.psi, *queue_bytes, *subframe_ms)?.bandwidth,
            RewardKind::BestEffort(_) => f64::INFINITY,
        };
        Ok(b.min(self.cap))
    }

    /// Optimal-bandwidth interval for price λ (an interval only when the
    /// composed subgradient is flat at value λ; a point otherwise).
    fn locate(&mut self, lambda: f64) -> Result<Interval> {
        self.locate_calls += 1;
        self.sg_accesses = 0;
        let iv = self.locate_inner(lambda)?;
        self.max_sg_accesses = self.max_sg_accesses.max(self.sg_accesses);
        Ok(Interval {
            lo: iv.lo.min(self.cap),
            hi: iv.hi.min(self.cap),
        })
    }

    fn locate_inner(&mut self, lambda: f64) -> Result<Interval> {
        if lambda > self.shutdown {
            return Ok(Interval { lo: 0.0, hi: 0.0 });
        }
        if matches!(self.reward, RewardKind::DelayQos { .. }) {
            if self.n_packets() == 0 {
                return Ok(Interval { lo: 0.0, hi: 0.0 });
            }
            self.packet_locate(lambda)
        } else {
            self.smooth_locate(lambda)
        }
    }

    /// Packet-count bisection: the ranges satisfy
    /// SG(1).hi ≥ SG(1).lo ≥ SG(2).hi ≥ …, so the largest η with
    /// SG(η).hi ≥ λ is found by binary search; λ then lies inside SG(η)
    /// (serve within packet η) or in the gap below it (pin at the
    /// breakpoint where packet η is exactly drained).
    fn packet_locate(&mut self, lambda: f64) -> Result<Interval> {
        let n = self.n_packets();
        let (mut lo_eta, mut hi_eta) = (1usize, n);
        if self.range(n)?.hi >= lambda {
            lo_eta = n;
        } else {
            // invariant: SG(lo_eta).hi ≥ λ > SG(hi_eta).hi
            while hi_eta - lo_eta > 1 {
                let mid = (lo_eta + hi_eta) / 2;
                if self.range(mid)?.hi >= lambda {
                    lo_eta = mid;
                } else {
                    hi_eta = mid;
                }
            }
        }
        let eta = lo_eta;
        let r = self.range(eta)?;
        if lambda >= r.lo {
            self.segment_solve(lambda, &r)
        } else {
            // For η < n, λ sits in the gap between SG(η+1).hi and
            // SG(η).lo, so the breakpoint where packet η is exactly
            // drained is optimal; for η = n, λ undercuts every range and
            // serving the whole queue is.
            Ok(Interval {
                lo: r.b_hi,
                hi: r.b_hi,
            })
        }
    }

    /// λ ∈ SG(η): solve within packet η's bandwidth span.
    fn segment_solve(&mut self, lambda: f64, r: &SgRange) -> Result<Interval> {
        let kink = self.link.power_limit_bw();
        // Flat stretch: the span has a linear part and λ equals its
        // slope, so every linear bandwidth inside the span is optimal.
        if r.b_lo < kink && lambda >= r.hi * (1.0 - 1e-12) {
            return Ok(Interval {
                lo: r.b_lo,
                hi: r.b_hi.min(kink),
            });
        }
        if r.b_lo <= kink && kink <= r.b_hi {
            let ks = rate_subdiff(self.link, self.psi, kink)?;
            if lambda >= r.slope_weight * ks.lo && lambda <= r.slope_weight * ks.hi {
                return Ok(Interval { lo: kink, hi: kink });
            }
        }
        // Strictly concave remainder of the span.
        let mut lo = r.b_lo.max(kink.min(r.b_hi));
        let mut hi = r.b_hi;
        for _ in 0..self.max_inner {
            if hi - lo < self.bw_tol {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if r.slope_weight * rate_subdiff(self.link, self.psi, mid)?.lo > lambda {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let b = 0.5 * (lo + hi);
        Ok(Interval { lo: b, hi: b })
    }

    /// Differentiable rewards: bandwidth bisection on the composed
    /// marginal value f′(h(b))·∂h(b), with the same power-kink pinning.
    fn smooth_locate(&mut self, lambda: f64) -> Result<Interval> {
        let cap = self.cap;
        let at_cap = self.product_smooth(cap)?;
        if lambda <= at_cap.0 {
            return Ok(Interval { lo: cap, hi: cap });
        }
        let kink = self.link.power_limit_bw();
        if kink < cap {
            let (klo, khi) = self.product_smooth(kink)?;
            if lambda >= klo && lambda <= khi {
                return Ok(Interval { lo: kink, hi: kink });
            }
        }
        let (mut lo, mut hi) = (0.0f64, cap);
        for _ in 0..self.max_inner {
            if hi - lo < self.bw_tol {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let (plo, phi) = self.product_smooth(mid)?;
            if plo > lambda {
                lo = mid;
            } else if phi < lambda {
                hi = mid;
            } else {
                return Ok(Interval { lo: mid, hi: mid });
            }
        }
        let mid = 0.5 * (lo + hi);
        Ok(Interval { lo: mid, hi: mid })
    }

    fn product_smooth(&self, b: f64) -> Result<(f64, f64)> {
        let r = rate(self.link, self.psi, b)?;
        let (flo, fhi) = self.reward.subdiff(r)?;
        let hs = rate_subdiff(self.link, self.psi, b)?;
        Ok((flo * hs.lo, fhi * hs.hi))
    }

    /// Marginal-value interval ∂f(h(b))·∂h(b) at bandwidth b, with
    /// positions within `bw_tol` of a breakpoint or the power kink
    /// snapped onto them (the allocation itself is only bw_tol-exact).
    fn product_interval(&mut self, b: f64) -> Result<(f64, f64)> {
        if !matches!(self.reward, RewardKind::DelayQos { .. }) {
            let kink = self.link.power_limit_bw();
            let at = if (b - kink).abs() <= self.bw_tol {
                kink
            } else {
                b
            };
            return self.product_smooth(at);
        }
        let n = self.n_packets();
        if n == 0 {
            return Ok((0.0, 0.0));
        }
        let tol = self.bw_tol;
        let last = self.range(n)?;
        if b >= last.b_hi - tol {
            // Queue fully drained at or before b.
            let hs = rate_subdiff(self.link, self.psi, b.max(last.b_hi))?;
            return Ok((0.0, last.slope_weight * hs.hi));
        }
        // Smallest η whose span ends beyond b.
        let (mut lo_eta, mut hi_eta) = (1usize, n);
        while hi_eta > lo_eta {
            let mid = (lo_eta + hi_eta) / 2;
            if self.range(mid)?.b_hi >= b {
                hi_eta = mid;
            } else {
                lo_eta = mid + 1;
            }
        }
        let eta = lo_eta;
        let r = self.range(eta)?;
        // Either breakpoint of the span counts: at the upper one the next
        // packet's slope bounds below, at the lower one the previous
        // packet's slope bounds above.
        let at_upper = b >= r.b_hi - tol;
        let at_lower = eta > 1 && b <= r.b_lo + tol;
        let kink = self.link.power_limit_bw();
        let near_kink = (b - kink).abs() <= tol;
        if !at_upper && !at_lower && !near_kink && b < kink {
            // Interior of the linear part: reuse the memoized endpoint so
            // equal marginal values compare bit-identically.
            return Ok((r.hi, r.hi));
        }
        let hs = rate_subdiff(self.link, self.psi, if near_kink { kink } else { b })?;
        let f_lo = if at_upper {
            // eta < n here; the drained case returned above.
            self.range(eta + 1)?.slope_weight
        } else {
            r.slope_weight
        };
        let f_hi = if at_lower {
            self.range(eta - 1)?.slope_weight
        } else {
            r.slope_weight
        };
        Ok((f_lo * hs.lo, f_hi * hs.hi))
    }
}

fn locate_all(solvers: &mut [UserSolver<'_>], lambda: f64) -> Result<Vec<Interval>> {
    solvers.iter_mut().map(|s| s.locate(lambda)).collect()
}

fn sum_lo(iv: &[Interval]) -> f64 {
    iv.iter().map(|i| i.lo).sum()
}

fn sum_hi(iv: &[Interval]) -> f64 {
    iv.iter().map(|i| i.hi).sum()
}

/// Spread the budget across per-user optimal intervals.
fn distribute(iv: &[Interval], budget: f64) -> Vec<f64> {
    let lo = sum_lo(iv);
    let hi = sum_hi(iv);
    let theta = if hi > lo {
        ((budget - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    iv.iter().map(|i| i.lo + theta * (i.hi - i.lo)).collect()
}

/// Terminal convex combination of the two bracket allocations.
fn combine(b_lo_side: &[f64], b_hi_side: &[f64], budget: f64) -> Vec<f64> {
    let s_lo: f64 = b_lo_side.iter().sum();
    let s_hi: f64 = b_hi_side.iter().sum();
    let alpha = if s_lo - s_hi > 0.0 {
        ((budget - s_hi) / (s_lo - s_hi)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    b_lo_side
        .iter()
        .zip(b_hi_side)
        .map(|(&l, &h)| alpha * l + (1.0 - alpha) * h)
        .collect()
}

/// Dual price bracket. The upper end is the largest activation
/// threshold (any higher price idles everyone); the lower end evaluates
/// each user's marginal value when handed the whole budget and takes the
/// best, which that user's demand alone then meets or exceeds.
pub fn lambda_bounds(problem: &AllocProblem) -> Result<(f64, f64)> {
    let psi = problem.psi.as_ref();
    let mut hi = 0.0f64;
    let mut lo = 0.0f64;
    let mut any = false;
    for u in &problem.users {
        let s = UserSolver::new(u, psi, problem.total_bandwidth, &problem.config)?;
        if s.shutdown <= 0.0 {
            continue;
        }
        any = true;
        hi = hi.max(s.shutdown);
        let b_eff = s.cap.min(problem.total_bandwidth);
        let r = rate(&u.link, psi, b_eff)?;
        let f_hi = u.reward.subdiff(r)?.1;
        let h_lo = rate_subdiff(&u.link, psi, b_eff)?.lo;
        lo = lo.max(f_hi * h_lo);
    }
    if !any {
        return Err(Error::EmptyProblem);
    }
    Ok((lo.min(hi), hi))
}

/// Smallest optimal bandwidth for one user at price λ.
pub fn solve_user(
    link: &UeLink,
    reward: &RewardKind,
    psi: &dyn SpectralEfficiency,
    cap: f64,
    lambda: f64,
) -> Result<f64> {
    Ok(solve_user_interval(link, reward, psi, cap, lambda)?.0)
}

/// The full optimal-bandwidth interval for one user at price λ.
pub fn solve_user_interval(
    link: &UeLink,
    reward: &RewardKind,
    psi: &dyn SpectralEfficiency,
    cap: f64,
    lambda: f64,
) -> Result<(f64, f64)> {
    require_finite("lambda", lambda)?;
    if lambda <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "lambda",
            value: lambda,
        });
    }
    let user = FlatUser {
        link: link.clone(),
        reward: reward.clone(),
        max_bandwidth: None,
    };
    let config = AllocConfig::default();
    let mut s = UserSolver::new(&user, psi, cap, &config)?;
    let iv = s.locate(lambda)?;
    Ok((iv.lo, iv.hi))
}

struct CertifiedExit {
    bandwidth: Vec<f64>,
    dual: f64,
}

/// Common-price optimality test at a candidate allocation: intersect the
/// marginal-value intervals of active users, require the intersection to
/// clear every idle user's activation threshold, and allow capped users
/// to sit anywhere below their marginal value.
fn try_certificate(
    solvers: &mut [UserSolver<'_>],
    b: &[f64],
    budget: f64,
    tol: f64,
) -> Result<Option<CertifiedExit>> {
    let total: f64 = b.iter().sum();
    if (total - budget).abs() > tol {
        return Ok(None);
    }
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    for (s, &bi) in solvers.iter_mut().zip(b) {
        if bi <= s.bw_tol {
            lo = lo.max(s.shutdown);
        } else if bi >= s.cap - s.bw_tol {
            hi = hi.min(s.product_interval(bi)?.1);
        } else {
            let (plo, phi) = s.product_interval(bi)?;
            lo = lo.max(plo);
            hi = hi.min(phi);
        }
    }
    if !(lo <= hi * (1.0 + 1e-9)) {
        return Ok(None);
    }
    let dual = if hi.is_finite() {
        0.5 * (lo + hi.max(lo))
    } else {
        lo
    };
    // Try to convert the certificate into an exactly budget-feasible
    // point: re-locating at the certified price recovers any flat
    // stretches (pins are price-insensitive inside their gap) and the
    // interpolation then lands on the budget.
    if dual > 0.0 {
        let iv = locate_all(solvers, dual)?;
        if sum_lo(&iv) <= budget + tol && sum_hi(&iv) >= budget - tol {
            return Ok(Some(CertifiedExit {
                bandwidth: distribute(&iv, budget),
                dual,
            }));
        }
    }
    Ok(Some(CertifiedExit {
        bandwidth: b.to_vec(),
        dual,
    }))
}

/// Solve the allocation problem.
pub fn allocate(problem: &AllocProblem) -> Result<Allocation> {
    let budget = problem.total_bandwidth;
    let psi = problem.psi.as_ref();
    let n = problem.users.len();
    let mut stats = SolveStats::default();
    if n == 0 {
        return finish(problem, Vec::new(), 0.0, (0.0, 0.0), stats);
    }
    let mut solvers = problem
        .users
        .iter()
        .map(|u| UserSolver::new(u, psi, budget, &problem.config))
        .collect::<Result<Vec<_>>>()?;
    let slack_tol = problem.config.bandwidth_tol * (n as f64 + 1.0);

    // Over-provisioned: every queue drains (and capped users cap out)
    // within the budget, so the price is zero.
    let satiation = solvers
        .iter_mut()
        .map(|s| s.satiation())
        .collect::<Result<Vec<_>>>()?;
    if satiation.iter().sum::<f64>() <= budget {
        stats.certified = true;
        collect_stats(&solvers, &mut stats);
        return finish(problem, satiation, 0.0, (0.0, 0.0), stats);
    }

    let (mut lam_lo, lam_hi) = lambda_bounds(problem)?;
    let mut lam_hi = lam_hi;
    let lam_hi_init = lam_hi;
    let width_target = problem.config.dual_rel_tol * lam_hi_init;
    lam_lo = lam_lo.clamp(lam_hi * 1e-15, lam_hi);

    let iv_hi = locate_all(&mut solvers, lam_hi)?;
    if sum_lo(&iv_hi) <= budget && budget <= sum_hi(&iv_hi) {
        stats.straddle_exit = true;
        collect_stats(&solvers, &mut stats);
        return finish(
            problem,
            distribute(&iv_hi, budget),
            lam_hi,
            (lam_hi, lam_hi),
            stats,
        );
    }
    let mut b_hi_side: Vec<f64> = iv_hi.iter().map(|i| i.lo).collect();

    let mut iv_lo = locate_all(&mut solvers, lam_lo)?;
    if sum_hi(&iv_lo) < budget - slack_tol {
        // The analytic lower bound overshot (its witness user is capped
        // below the budget); fall back to an effectively-zero price.
        stats.bracket_fallback = true;
        lam_lo = lam_hi * 1e-15;
        iv_lo = locate_all(&mut solvers, lam_lo)?;
    }
    if sum_lo(&iv_lo) <= budget && budget <= sum_hi(&iv_lo) {
        stats.straddle_exit = true;
        collect_stats(&solvers, &mut stats);
        return finish(
            problem,
            distribute(&iv_lo, budget),
            lam_lo,
            (lam_lo, lam_lo),
            stats,
        );
    }
    let mut b_lo_side: Vec<f64> = iv_lo.iter().map(|i| i.hi).collect();

    let mut certified: Option<CertifiedExit> = None;
    for iter in 1..=problem.config.max_outer_iters {
        let candidate = combine(&b_lo_side, &b_hi_side, budget);
        if let Some(exit) = try_certificate(&mut solvers, &candidate, budget, slack_tol)? {
            stats.certified = true;
            certified = Some(exit);
            break;
        }
        if lam_hi - lam_lo <= width_target {
            break;
        }
        stats.iterations = iter;
        let lambda = 0.5 * (lam_hi + lam_lo);
        let iv = locate_all(&mut solvers, lambda)?;
        let d_lo = sum_lo(&iv);
        let d_hi = sum_hi(&iv);
        if d_lo <= budget && budget <= d_hi {
            stats.straddle_exit = true;
            collect_stats(&solvers, &mut stats);
            return finish(
                problem,
                distribute(&iv, budget),
                lambda,
                (lambda, lambda),
                stats,
            );
        }
        if d_lo > budget {
            lam_lo = lambda;
            b_lo_side = iv.iter().map(|i| i.lo).collect();
        } else {
            lam_hi = lambda;
            b_hi_side = iv.iter().map(|i| i.hi).collect();
        }
    }
    collect_stats(&solvers, &mut stats);
    match certified {
        Some(exit) => {
            let dual = exit.dual;
            finish(problem, exit.bandwidth, dual, (dual, dual), stats)
        }
        None => {
            let bandwidth = combine(&b_lo_side, &b_hi_side, budget);
            let dual = 0.5 * (lam_lo + lam_hi);
            finish(problem, bandwidth, dual, (lam_lo, lam_hi), stats)
        }
    }
}

fn collect_stats(solvers: &[UserSolver<'_>], stats: &mut SolveStats) {
    for s in solvers {
        stats.locate_calls += s.locate_calls;
        stats.max_sg_accesses_per_locate = stats.max_sg_accesses_per_locate.max(s.max_sg_accesses);
        stats.rate_inversions += s.rate_inversions;
    }
}

fn finish(
    problem: &AllocProblem,
    bandwidth: Vec<f64>,
    dual: f64,
    dual_interval: (f64, f64),
    stats: SolveStats,
) -> Result<Allocation> {
    let psi = problem.psi.as_ref();
    let mut rates = Vec::with_capacity(bandwidth.len());
    let mut rewards = Vec::with_capacity(bandwidth.len());
    for (u, &b) in problem.users.iter().zip(&bandwidth) {
        let r = rate(&u.link, psi, b)?;
        rates.push(r);
        rewards.push(u.reward.reward(r)?);
    }
    let objective = rewards.iter().sum();
    let slack = problem.total_bandwidth - bandwidth.iter().sum::<f64>();
    Ok(Allocation {
        bandwidth,
        rates,
        rewards,
        objective,
        dual,
        dual_interval,
        slack,
        stats,
    })
}

/// Exact optimum over the discretized simplex: every user's bandwidth a
/// multiple of budget/units, totals within the budget. Dynamic program
/// over users and remaining units, O(N·units²).
#[derive(Debug, Clone)]
pub struct GridSolution {
    pub bandwidth: Vec<f64>,
    pub objective: f64,
    pub unit: f64,
}

pub fn grid_search(problem: &AllocProblem, units: usize) -> Result<GridSolution> {
    if units == 0 {
        return Err(Error::InvalidParameter {
            name: "units",
            value: 0.0,
        });
    }
    let psi = problem.psi.as_ref();
    let n = problem.users.len();
    let delta = problem.total_bandwidth / units as f64;
    let mut value = vec![0.0f64; units + 1];
    let mut choice: Vec<Vec<u32>> = Vec::with_capacity(n);
    for u in &problem.users {
        let cap = u
            .max_bandwidth
            .unwrap_or(f64::INFINITY)
            .min(problem.total_bandwidth);
        let u_max = ((cap / delta + 1e-9).floor() as usize).min(units);
        let gains: Vec<f64> = (0..=u_max)
            .map(|k| {
                let r = rate(&u.link, psi, k as f64 * delta)?;
                u.reward.reward(r)
            })
            .collect::<Result<_>>()?;
        let mut next = vec![f64::NEG_INFINITY; units + 1];
        let mut ch = vec![0u32; units + 1];
        for k in 0..=units {
            for (used, gain) in gains.iter().enumerate().take(k.min(u_max) + 1) {
                let v = value[k - used] + gain;
                if v > next[k] {
                    next[k] = v;
                    ch[k] = used as u32;
                }
            }
        }
        value = next;
        choice.push(ch);
    }
    let mut remaining = units;
    let mut bandwidth = vec![0.0; n];
    for i in (0..n).rev() {
        let used = choice[i][remaining] as usize;
        bandwidth[i] = used as f64 * delta;
        remaining -= used;
    }
    Ok(GridSolution {
        bandwidth,
        objective: value[units],
        unit: delta,
    })
}

/// Worst-case objective gap between the continuous optimum and the grid
/// optimum: rounding each user down to the grid loses at most one unit
/// of bandwidth at that user's steepest marginal value.
pub fn grid_gap_bound(problem: &AllocProblem, units: usize) -> Result<f64> {
    let psi = problem.psi.as_ref();
    let delta = problem.total_bandwidth / units as f64;
    let mut total = 0.0;
    for u in &problem.users {
        let slope0 = rate_subdiff(&u.link, psi, 0.0)?.hi;
        total += u.reward.max_subdiff_at_zero() * slope0 * delta;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_power::Shannon;
    use crate::reward::{BeState, LogUtility, QosQueue, QueuedPacket};
    use approx::assert_relative_eq;

    const RB_HZ: f64 = 180e3;

    fn qos_user(delays: &[f64], bytes: f64, sinr_db: f64, kink_rbs: f64) -> FlatUser {
        let gamma = 10f64.powf(sinr_db / 10.0);
        let link = UeLink::new(1.0, gamma, gamma * kink_rbs * RB_HZ, 1.0).unwrap();
        let queue = QosQueue::new(
            delays
                .iter()
                .map(|&d| QueuedPacket {
                    bytes,
                    delay_ms: d,
                })
                .collect(),
            1.0,
        )
        .unwrap();
        FlatUser {
            link,
            reward: RewardKind::DelayQos { queue, weight: 1.0 },
            max_bandwidth: None,
        }
    }

    /// The two-user worked instance: 500-bit packets, power kinks at 5
    /// and 8 RBs, SINRs 0.5 and 4 dB, 10 RBs total.
    fn two_user_instance() -> AllocProblem {
        AllocProblem::new(
            vec![
                qos_user(&[450.0, 330.0, 135.0, 80.0, 20.0], 62.5, 0.5, 5.0),
                qos_user(&[170.0, 150.0, 140.0, 110.0, 80.0, 20.0], 62.5, 4.0, 8.0),
            ],
            10.0 * RB_HZ,
            Arc::new(Shannon),
        )
        .unwrap()
    }

    #[test]
    fn two_user_instance_allocates_five_rbs_each() {
        let p = two_user_instance();
        let a = allocate(&p).unwrap();
        for &b in &a.bandwidth {
            assert_relative_eq!(b, 900e3, epsilon = 1.0);
            assert_eq!((b / RB_HZ).round() as i64, 5);
        }
        assert!(a.stats.certified || a.stats.straddle_exit);
        assert!(a.slack.abs() <= 3.0);
        // The optimal price is user 2's marginal value mid-packet-4:
        // 110 · log2(1 + 10^0.4) per rate unit, times bytes-per-rate-unit.
        let conv = 1e-3 / 8.0;
        assert_relative_eq!(a.dual / conv, 199.34708104306878, max_relative = 1e-9);
    }

    #[test]
    fn two_user_instance_satisfies_pairwise_optimality() {
        let p = two_user_instance();
        let a = allocate(&p).unwrap();
        // Both users active: their marginal-value intervals at the
        // output must share the dual price.
        let psi = Shannon;
        for (u, &b) in p.users.iter().zip(&a.bandwidth) {
            let cfg = AllocConfig::default();
            let mut s = UserSolver::new(u, &psi, p.total_bandwidth, &cfg).unwrap();
            let (lo, hi) = s.product_interval(b).unwrap();
            assert!(
                lo <= a.dual * (1.0 + 1e-9) && a.dual <= hi * (1.0 + 1e-9),
                "dual {} outside [{lo}, {hi}]",
                a.dual
            );
        }
    }

    #[test]
    fn converges_fast_on_the_worked_instance() {
        let a = allocate(&two_user_instance()).unwrap();
        assert!(a.stats.iterations <= 12, "took {}", a.stats.iterations);
    }

    #[test]
    fn lambda_bounds_match_threshold_formula() {
        let p = two_user_instance();
        let (lo, hi) = lambda_bounds(&p).unwrap();
        let conv = 1e-3 / 8.0;
        let psi1 = (1.0 + 10f64.powf(0.05)).log2();
        let psi2 = (1.0 + 10f64.powf(0.4)).log2();
        assert_relative_eq!(
            hi,
            (450.0 * psi1).max(170.0 * psi2) * conv,
            max_relative = 1e-12
        );
        assert!(lo <= hi && lo >= 0.0);
    }

    #[test]
    fn price_above_threshold_idles_every_user() {
        let p = two_user_instance();
        let (_, hi) = lambda_bounds(&p).unwrap();
        for u in &p.users {
            let b = solve_user(&u.link, &u.reward, &Shannon, p.total_bandwidth, hi * 1.01).unwrap();
            assert_eq!(b, 0.0);
        }
    }

    #[test]
    fn solve_user_interval_contains_worked_optimum() {
        let p = two_user_instance();
        let a = allocate(&p).unwrap();
        for u in &p.users {
            let (lo, hi) =
                solve_user_interval(&u.link, &u.reward, &Shannon, p.total_bandwidth, a.dual)
                    .unwrap();
            assert!(lo <= 900e3 + 1.0 && 900e3 - 1.0 <= hi, "[{lo}, {hi}]");
        }
    }

    #[test]
    fn single_user_with_ample_budget_drains_queue() {
        // 100 bytes/ms sits below this link's power-limited rate ceiling
        // (GP/I/ln2 ≈ 129.5 bytes/ms), so a finite bandwidth drains it.
        let user = qos_user(&[50.0, 10.0], 50.0, 3.0, 2.0);
        let link = user.link.clone();
        let p = AllocProblem::new(vec![user], 50.0 * RB_HZ, Arc::new(Shannon)).unwrap();
        let a = allocate(&p).unwrap();
        let drain = compute_b_max(&link, &Shannon, 100.0, 1.0).unwrap();
        assert!(!drain.saturated);
        assert_relative_eq!(a.bandwidth[0], drain.bandwidth, epsilon = 1.0);
        assert_eq!(a.dual, 0.0);
        assert!(a.slack > 0.0);
        // Served rate drains the whole queue.
        assert_relative_eq!(a.rates[0] * 1e-3 / 8.0, 100.0, max_relative = 1e-6);
    }

    #[test]
    fn empty_problem_allocates_nothing() {
        let p = AllocProblem::new(Vec::new(), 1e6, Arc::new(Shannon)).unwrap();
        let a = allocate(&p).unwrap();
        assert!(a.bandwidth.is_empty());
        assert_eq!(a.objective, 0.0);
        // Users with empty queues count as an empty problem for bounds.
        let p2 = AllocProblem::new(
            vec![qos_user(&[], 1.0, 1.0, 1.0)],
            1e6,
            Arc::new(Shannon),
        )
        .unwrap();
        assert!(matches!(lambda_bounds(&p2), Err(Error::EmptyProblem)));
        let a2 = allocate(&p2).unwrap();
        assert_eq!(a2.bandwidth, vec![0.0]);
    }

    #[test]
    fn compute_b_max_closed_form_and_saturation() {
        let gamma = 10f64.powf(0.2);
        let link = UeLink::new(1.0, gamma, gamma * 1e6, 1.0).unwrap();
        // Linear region: b = drain rate / ψ.
        let psi_lin = (1.0 + gamma).log2();
        let q = 50.0; // 400 kbit/s drain, well under the kink rate
        let bm = compute_b_max(&link, &Shannon, q, 1.0).unwrap();
        assert!(!bm.saturated);
        assert_relative_eq!(bm.bandwidth, 400e3 / psi_lin, max_relative = 1e-8);
        assert_eq!(compute_b_max(&link, &Shannon, 0.0, 1.0).unwrap().bandwidth, 0.0);
        // A queue far past the rate ceiling saturates.
        let tiny = UeLink::new(1.0, 1.0, 10.0, 1.0).unwrap();
        let bm = compute_b_max(&tiny, &Shannon, 1e9, 1.0).unwrap();
        assert!(bm.saturated);
    }

    #[test]
    fn solve_user_beats_a_dense_grid() {
        let user = qos_user(&[210.0, 90.0, 35.0, 12.0], 180.0, 2.0, 3.0);
        let psi = Shannon;
        let cap = 12.0 * RB_HZ;
        for &lambda_frac in &[0.9, 0.5, 0.22, 0.08, 0.015] {
            let cfg = AllocConfig::default();
            let mut s = UserSolver::new(&user, &psi, cap, &cfg).unwrap();
            let lambda = s.shutdown * lambda_frac;
            let b = solve_user(&user.link, &user.reward, &psi, cap, lambda).unwrap();
            let obj = |b: f64| {
                user.reward.reward(rate(&user.link, &psi, b).unwrap()).unwrap() - lambda * b
            };
            let mine = obj(b);
            let n_grid = 100_000;
            let mut best = f64::NEG_INFINITY;
            for k in 0..=n_grid {
                best = best.max(obj(cap * k as f64 / n_grid as f64));
            }
            // Within one grid cell's worth of the steepest slope.
            let bound = s.shutdown * cap / n_grid as f64;
            assert!(
                mine >= best - bound - 1e-9,
                "λ={lambda}: {mine} < {best} - {bound}"
            );
        }
    }

    #[test]
    fn best_effort_price_solution_matches_closed_form() {
        // Log utility in the linear channel region: marginal value is
        // ψ/((1-α)x + α b ψ) = λ, so b = (ψ/λ - (1-α)x)/(α ψ).
        let gamma = 10f64.powf(0.3);
        let link = UeLink::new(1.0, gamma, gamma * 50e6, 1.0).unwrap();
        let psi_lin = (1.0 + gamma).log2();
        let (x, alpha) = (2e6, 0.2);
        let be = RewardKind::BestEffort(BeState::new(x, alpha, Arc::new(LogUtility)).unwrap());
        let lambda = 2e-7;
        let b = solve_user(&link, &be, &Shannon, 40e6, lambda).unwrap();
        let expect = (psi_lin / lambda - (1.0 - alpha) * x) / (alpha * psi_lin);
        assert_relative_eq!(b, expect, epsilon = 1.0);
    }

    #[test]
    fn queue_drain_price_solution_matches_closed_form() {
        let gamma = 10f64.powf(0.1);
        let link = UeLink::new(1.0, gamma, gamma * 5e6, 1.0).unwrap();
        let psi_lin = (1.0 + gamma).log2();
        let conv = 1e-3 / 8.0;
        let q = 4000.0;
        let re = RewardKind::QueueDrain {
            queue_bytes: q,
            subframe_ms: 1.0,
        };
        // (Q − bψ·conv)·conv·ψ = λ.
        let lambda = 0.52;
        let b = solve_user(&link, &re, &Shannon, 4e6, lambda).unwrap();
        let expect = (q * conv * psi_lin - lambda) / (psi_lin * psi_lin * conv * conv);
        assert_relative_eq!(b, expect, epsilon = 1.0);
    }

    #[test]
    fn total_demand_is_nonincreasing_in_price() {
        let users = vec![
            qos_user(&[300.0, 120.0, 44.0], 140.0, 1.5, 4.0),
            qos_user(&[95.0, 60.0, 22.0, 8.0], 90.0, 3.5, 6.0),
        ];
        let p = AllocProblem::new(users, 15.0 * RB_HZ, Arc::new(Shannon)).unwrap();
        let (_, hi) = lambda_bounds(&p).unwrap();
        let mut last = f64::INFINITY;
        for k in 1..40 {
            let lambda = hi * k as f64 / 40.0;
            let total: f64 = p
                .users
                .iter()
                .map(|u| solve_user(&u.link, &u.reward, &Shannon, p.total_bandwidth, lambda))
                .sum::<Result<f64>>()
                .unwrap();
            assert!(total <= last + 1.0, "demand rose at λ={lambda}");
            last = total;
        }
    }

    #[test]
    fn allocate_matches_grid_dynamic_program() {
        let users = vec![
            qos_user(&[250.0, 100.0, 30.0], 150.0, 1.0, 3.0),
            qos_user(&[180.0, 90.0, 55.0, 20.0], 110.0, 4.5, 5.0),
            qos_user(&[60.0, 15.0], 220.0, 2.5, 4.0),
        ];
        let p = AllocProblem::new(users, 20.0 * RB_HZ, Arc::new(Shannon)).unwrap();
        let a = allocate(&p).unwrap();
        let g = grid_search(&p, 200).unwrap();
        let bound = grid_gap_bound(&p, 200).unwrap();
        // Lower side up to the solver's own duality slack.
        let dual_slack = (a.dual_interval.1 - a.dual_interval.0) * p.total_bandwidth;
        assert!(
            a.objective >= g.objective - dual_slack - 1e-9 * g.objective.abs(),
            "continuous {} below grid {}",
            a.objective,
            g.objective
        );
        assert!(
            a.objective <= g.objective + bound,
            "continuous {} exceeds grid {} + bound {}",
            a.objective,
            g.objective,
            bound
        );
        let total: f64 = g.bandwidth.iter().sum();
        assert!(total <= p.total_bandwidth + 1e-6);
    }

    #[test]
    fn iteration_and_feasibility_limits_hold() {
        let users = vec![
            qos_user(&[310.0, 170.0, 80.0, 33.0, 9.0], 75.0, 0.8, 5.0),
            qos_user(&[140.0, 85.0, 41.0], 200.0, 3.2, 7.0),
            qos_user(&[520.0, 260.0], 60.0, 1.9, 2.0),
        ];
        let p = AllocProblem::new(users, 8.0 * RB_HZ, Arc::new(Shannon)).unwrap();
        let a = allocate(&p).unwrap();
        assert!(a.stats.iterations <= p.config.max_outer_iters);
        assert!(a.slack >= -p.config.bandwidth_tol * 4.0);
        for (u, &b) in p.users.iter().zip(&a.bandwidth) {
            assert!(b >= 0.0);
            assert!(b <= p.total_bandwidth + 1.0);
            let _ = u;
        }
        let certified_or_tight = a.stats.certified
            || a.stats.straddle_exit
            || (a.dual_interval.1 - a.dual_interval.0)
                <= p.config.dual_rel_tol * lambda_bounds(&p).unwrap().1;
        assert!(certified_or_tight);
    }

    #[test]
    fn sg_access_count_stays_logarithmic() {
        for &l in &[4usize, 16, 64, 256] {
            let delays: Vec<f64> = (0..l).map(|k| 1000.0 - 3.5 * k as f64).collect();
            let user = qos_user(&delays, 45.0, 2.0, 6.0);
            let psi = Shannon;
            let cfg = AllocConfig::default();
            let mut s = UserSolver::new(&user, &psi, 30.0 * RB_HZ, &cfg).unwrap();
            let shutdown = s.shutdown;
            for k in 1..=20 {
                s.locate(shutdown * k as f64 / 21.0).unwrap();
            }
            let bound = 2.0 * (l as f64).log2() + 6.0;
            assert!(
                (s.max_sg_accesses as f64) <= bound,
                "L={l}: {} accesses > {bound}",
                s.max_sg_accesses
            );
        }
    }

    #[test]
    fn max_bandwidth_cap_binds() {
        let mut user = qos_user(&[400.0, 200.0, 100.0], 500.0, 2.0, 6.0);
        user.max_bandwidth = Some(2.0 * RB_HZ);
        let p = AllocProblem::new(vec![user], 10.0 * RB_HZ, Arc::new(Shannon)).unwrap();
        let a = allocate(&p).unwrap();
        assert!(a.bandwidth[0] <= 2.0 * RB_HZ + 1.0);
    }
}
