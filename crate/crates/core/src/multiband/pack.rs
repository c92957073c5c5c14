//! Rounding of a fractional multi-band solution onto whole, contiguous
//! resource-block slabs, as single-carrier uplinks require.

use crate::multiband::{objective_for_served_rates, MultiBandProblem, MultiBandSolution};
use crate::{Error, Result};

/// One contiguous run of resource blocks granted to one user in a band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackedSlab {
    pub user: usize,
    pub rb_start: usize,
    pub rb_count: usize,
}

/// Whole-block, contiguous-per-band version of a fractional solution.
#[derive(Debug, Clone)]
pub struct BandPacking {
    /// slabs[band]: disjoint contiguous runs in user-index order.
    pub slabs: Vec<Vec<PackedSlab>>,
    /// bandwidth[user][band] after rounding, Hz.
    pub bandwidth: Vec<Vec<f64>>,
    /// Feasible per-band rates at the rounded bandwidth, bit/s.
    pub rates: Vec<Vec<f64>>,
    /// byte·ms at the rounded rates.
    pub objective: f64,
}

/// Round the fractional bandwidths of `solution` to whole resource blocks
/// of `rb_hz` and lay each band out as contiguous slabs in user order.
///
/// Within each band every user first gets the floor of its fractional
/// block count; leftover blocks go to the largest fractional remainders,
/// so exactly `floor(band_bandwidth/rb_hz)` blocks are placed. Rates stay
/// feasible: where rounding shrank a user's bandwidth its rate shrinks
/// proportionally (spectral efficiency is unchanged, so the PSD cap holds
/// and per-band power drops), and where it grew the rate is kept (power
/// falls with extra bandwidth at a fixed rate, and the PSD cap loosens).
/// A user's total bandwidth can exceed its optional cap by at most one
/// block per band; power and PSD limits are never exceeded.
pub fn contiguity_pack(
    problem: &MultiBandProblem,
    solution: &MultiBandSolution,
    rb_hz: f64,
) -> Result<BandPacking> {
    if !(rb_hz > 0.0) || !rb_hz.is_finite() {
        return Err(Error::InvalidParameter {
            name: "rb_hz",
            value: rb_hz,
        });
    }
    let n = problem.users.len();
    let m = problem.band_bandwidth.len();
    if solution.bandwidth.len() != n || solution.bandwidth.iter().any(|b| b.len() != m) {
        return Err(Error::InvalidParameter {
            name: "solution_shape",
            value: solution.bandwidth.len() as f64,
        });
    }
    let mut bandwidth = vec![vec![0.0; m]; n];
    let mut slabs = Vec::with_capacity(m);
    for j in 0..m {
        let total_rbs = (problem.band_bandwidth[j] / rb_hz).floor() as usize;
        let targets: Vec<f64> = (0..n).map(|i| solution.bandwidth[i][j] / rb_hz).collect();
        let mut counts: Vec<usize> = targets.iter().map(|t| t.floor().max(0.0) as usize).collect();
        let used: usize = counts.iter().sum();
        // sum(floor(t_i)) <= floor(sum(t_i)) and the fractional bandwidths
        // sum to the band, so the floors never overshoot the block count.
        let leftover = total_rbs.saturating_sub(used);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let fa = targets[a] - targets[a].floor();
            let fb = targets[b] - targets[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &i in order.iter().take(leftover) {
            counts[i] += 1;
        }
        let mut start = 0;
        let mut band_slabs = Vec::new();
        for (i, &c) in counts.iter().enumerate() {
            if c > 0 {
                band_slabs.push(PackedSlab {
                    user: i,
                    rb_start: start,
                    rb_count: c,
                });
                start += c;
            }
            bandwidth[i][j] = c as f64 * rb_hz;
        }
        slabs.push(band_slabs);
    }
    let mut rates = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let frac = solution.bandwidth[i][j];
            let packed = bandwidth[i][j];
            rates[i][j] = if packed <= 0.0 || frac <= 0.0 {
                0.0
            } else if packed >= frac {
                solution.rates[i][j]
            } else {
                solution.rates[i][j] * packed / frac
            };
        }
    }
    let served: Vec<f64> = (0..n)
        .map(|i| {
            let tx: f64 = rates[i].iter().sum();
            tx.min(solution.served_rate[i].max(0.0))
        })
        .collect();
    let objective = objective_for_served_rates(problem, &served)?;
    Ok(BandPacking {
        slabs,
        bandwidth,
        rates,
        objective,
    })
}
