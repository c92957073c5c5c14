//! Joint bandwidth and rate allocation across several frequency bands with
//! per-user transmit-power budgets.
//!
//! Unlike the single-carrier allocator in `flat_alloc`, a user here splits
//! one power budget across M bands with independent channel gains, so
//! per-band rates and bandwidths must be chosen jointly. The problem is a
//! convex program solved by a primal log-barrier method; each Newton system
//! is eliminated in time linear in the number of users (`newton`), and a
//! dense reference route over the same formulation is kept for
//! cross-checking (`solve_reference`). Spectral efficiency follows the
//! Shannon curve throughout this module.

mod barrier;
pub mod linalg;
pub mod newton;
mod pack;

pub use pack::{contiguity_pack, BandPacking, PackedSlab};

use crate::reward::QosQueue;
use crate::{Error, Result};
use barrier::{DenseBackend, KktBackend, NormProblem, NormUser, StructuredBackend};

/// Shape of the per-band transmit-power curve as a function of spectral
/// efficiency q = rate/bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PowerConstraintForm {
    /// Exact inverse of the Shannon curve: power = (I/G)·b·(2^q - 1).
    #[default]
    ShannonInverse,
    /// Variant with the exponent shifted down by one bit/s/Hz, kept for
    /// comparison runs: power = (I/G)·b·(2^(q-1) - 1).
    ShiftedExponent,
}

/// Channel to one user in one band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandLink {
    pub gain: f64,
    /// Noise-plus-interference density at the receiver, W/Hz.
    pub interference_psd: f64,
}

/// One user of the multi-band problem.
#[derive(Debug, Clone)]
pub struct MultiUser {
    /// One entry per band.
    pub links: Vec<BandLink>,
    pub queue: QosQueue,
    pub weight: f64,
    /// Total transmit power budget across bands, W.
    pub peak_power: f64,
    /// Transmit PSD ceiling, W/Hz.
    pub psd_cap: f64,
    /// Optional cap on the user's total bandwidth, Hz.
    pub max_bandwidth: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MultiBandProblem {
    pub users: Vec<MultiUser>,
    /// Bandwidth of each band, Hz. Every band is fully distributed.
    pub band_bandwidth: Vec<f64>,
    pub power_form: PowerConstraintForm,
    pub config: IpmConfig,
}

impl MultiBandProblem {
    pub fn new(users: Vec<MultiUser>, band_bandwidth: Vec<f64>) -> Self {
        Self {
            users,
            band_bandwidth,
            power_form: PowerConstraintForm::default(),
            config: IpmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IpmConfig {
    /// Starting barrier weight t.
    pub initial_barrier: f64,
    /// Multiplier applied to t between centering rounds.
    pub barrier_scale_step: f64,
    /// Newton stop: half squared decrement below this value.
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    /// Stop when (constraint count)/t falls below gap_tol times the
    /// objective magnitude.
    pub gap_tol: f64,
    pub max_barrier_rounds: usize,
    /// Armijo sufficient-decrease fraction for the line search.
    pub armijo: f64,
    /// Backtracking shrink factor.
    pub backtrack: f64,
}

impl Default for IpmConfig {
    fn default() -> Self {
        Self {
            initial_barrier: 1.0,
            barrier_scale_step: 20.0,
            newton_tol: 1e-8,
            max_newton_iters: 60,
            gap_tol: 1e-6,
            max_barrier_rounds: 32,
            armijo: 0.3,
            backtrack: 0.6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IpmStats {
    pub barrier_rounds: usize,
    pub newton_iters: usize,
    /// Multiply-add count spent inside the structured Newton solves
    /// (zero on the dense reference route).
    pub kernel_flops: u64,
    pub constraint_count: usize,
    /// Objective (byte·ms) after each centering round.
    pub round_objectives: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MultiBandSolution {
    /// bandwidth[user][band], Hz.
    pub bandwidth: Vec<Vec<f64>>,
    /// rates[user][band], bit/s.
    pub rates: Vec<Vec<f64>>,
    /// Total served rate per user, bit/s.
    pub served_rate: Vec<f64>,
    /// byte·ms.
    pub objective: f64,
    /// Marginal objective value of one Hz in each band, byte·ms per Hz.
    pub band_prices: Vec<f64>,
    /// Upper bound on the objective shortfall, byte·ms.
    pub duality_gap: f64,
    pub stats: IpmStats,
}

/// Piecewise-linear reward of serving a queue, as parallel pieces: piece l
/// accepts up to `widths[l]` bit/s of served rate valued at `slopes[l]`
/// byte·ms per bit/s. Pieces are ordered oldest packet first, so slopes are
/// non-increasing and greedy filling in order is optimal.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardPieces {
    pub widths: Vec<f64>,
    pub slopes: Vec<f64>,
}

pub fn decompose_reward(queue: &QosQueue, weight: f64) -> Result<RewardPieces> {
    if !(weight > 0.0) || !weight.is_finite() {
        return Err(Error::InvalidParameter {
            name: "weight",
            value: weight,
        });
    }
    let conv = queue.bytes_per_rate_unit();
    let mut widths = Vec::with_capacity(queue.len());
    let mut slopes = Vec::with_capacity(queue.len());
    for p in queue.packets() {
        widths.push(p.bytes / conv);
        slopes.push(weight * p.delay_ms * conv);
    }
    Ok(RewardPieces { widths, slopes })
}

/// Objective value (byte·ms) when each user serves `served[i]` bit/s,
/// filling its reward pieces oldest first.
pub fn objective_for_served_rates(problem: &MultiBandProblem, served: &[f64]) -> Result<f64> {
    if served.len() != problem.users.len() {
        return Err(Error::InvalidParameter {
            name: "served_len",
            value: served.len() as f64,
        });
    }
    let mut total = 0.0;
    for (u, &r) in problem.users.iter().zip(served) {
        let pieces = decompose_reward(&u.queue, u.weight)?;
        let mut remaining = r.max(0.0);
        for (w, s) in pieces.widths.iter().zip(&pieces.slopes) {
            let take = w.min(remaining);
            total += s * take;
            remaining -= take;
            if remaining <= 0.0 {
                break;
            }
        }
    }
    Ok(total)
}

fn normalize(p: &MultiBandProblem) -> Result<(NormProblem, f64, f64)> {
    if p.users.is_empty() || p.band_bandwidth.is_empty() {
        return Err(Error::EmptyProblem);
    }
    for &bw in &p.band_bandwidth {
        if !(bw > 0.0) || !bw.is_finite() {
            return Err(Error::InvalidParameter {
                name: "band_bandwidth",
                value: bw,
            });
        }
    }
    let sigma = p.band_bandwidth.iter().cloned().fold(0.0, f64::max);
    let m = p.band_bandwidth.len();
    let mut piece_sets = Vec::with_capacity(p.users.len());
    let mut s_max = 0.0f64;
    for u in &p.users {
        if u.links.len() != m {
            return Err(Error::InvalidParameter {
                name: "links_per_user",
                value: u.links.len() as f64,
            });
        }
        if !(u.peak_power > 0.0) || !u.peak_power.is_finite() {
            return Err(Error::InvalidParameter {
                name: "peak_power",
                value: u.peak_power,
            });
        }
        if !(u.psd_cap > 0.0) || !u.psd_cap.is_finite() {
            return Err(Error::InvalidParameter {
                name: "psd_cap",
                value: u.psd_cap,
            });
        }
        if let Some(c) = u.max_bandwidth {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::InvalidParameter {
                    name: "max_bandwidth",
                    value: c,
                });
            }
        }
        for l in &u.links {
            if !(l.gain > 0.0) || !l.gain.is_finite() {
                return Err(Error::InvalidLink {
                    name: "gain",
                    value: l.gain,
                });
            }
            if !(l.interference_psd > 0.0) || !l.interference_psd.is_finite() {
                return Err(Error::InvalidLink {
                    name: "interference_psd",
                    value: l.interference_psd,
                });
            }
        }
        let pieces = decompose_reward(&u.queue, u.weight)?;
        for &s in &pieces.slopes {
            s_max = s_max.max(s * sigma);
        }
        piece_sets.push(pieces);
    }
    let s_max = if s_max > 0.0 { s_max } else { 1.0 };
    let users = p
        .users
        .iter()
        .zip(&piece_sets)
        .map(|(u, pieces)| NormUser {
            rho: pieces.widths.iter().map(|w| w / sigma).collect(),
            slope: pieces.slopes.iter().map(|s| s * sigma / s_max).collect(),
            cpow: u
                .links
                .iter()
                .map(|l| l.interference_psd / l.gain * sigma / u.peak_power)
                .collect(),
            qcap: u
                .links
                .iter()
                .map(|l| (1.0 + l.gain * u.psd_cap / l.interference_psd).log2())
                .collect(),
            cap: u.max_bandwidth.map(|c| c / sigma),
        })
        .collect();
    let shift = match p.power_form {
        PowerConstraintForm::ShannonInverse => 0.0,
        PowerConstraintForm::ShiftedExponent => 1.0,
    };
    let norm = NormProblem {
        users,
        band_bw: p.band_bandwidth.iter().map(|b| b / sigma).collect(),
        shift,
    };
    Ok((norm, sigma, s_max))
}

fn solve_with(problem: &MultiBandProblem, backend: &mut dyn KktBackend) -> Result<MultiBandSolution> {
    let (norm, sigma, s_max) = normalize(problem)?;
    let out = barrier::run_ipm(&norm, &problem.config, backend)?;
    let mut bandwidth = Vec::with_capacity(norm.users.len());
    let mut rates = Vec::with_capacity(norm.users.len());
    let mut served_rate = Vec::with_capacity(norm.users.len());
    for (u, xi) in norm.users.iter().zip(&out.x) {
        bandwidth.push((0..u.bands()).map(|j| xi[u.idx_b(j)] * sigma).collect());
        rates.push((0..u.bands()).map(|j| xi[u.idx_r(j)] * sigma).collect());
        served_rate.push(xi[..u.pieces()].iter().sum::<f64>() * sigma);
    }
    let objective = norm.objective(&out.x) * s_max;
    Ok(MultiBandSolution {
        bandwidth,
        rates,
        served_rate,
        objective,
        band_prices: out.band_prices.iter().map(|y| y * s_max / sigma).collect(),
        duality_gap: out.gap * s_max,
        stats: IpmStats {
            barrier_rounds: out.rounds,
            newton_iters: out.newton_iters,
            kernel_flops: backend.flops(),
            constraint_count: norm.constraint_count(),
            round_objectives: out.round_objectives.iter().map(|o| o * s_max).collect(),
        },
    })
}

/// Solve with the structured (linear-in-users) Newton elimination.
pub fn solve(problem: &MultiBandProblem) -> Result<MultiBandSolution> {
    let mut backend = StructuredBackend::default();
    solve_with(problem, &mut backend)
}

/// Solve the same barrier formulation with a dense KKT factorization.
/// Reference route for validating the structured solver.
pub fn solve_reference(problem: &MultiBandProblem) -> Result<MultiBandSolution> {
    let mut backend = DenseBackend;
    solve_with(problem, &mut backend)
}
