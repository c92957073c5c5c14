//! Logarithmic-barrier formulation of the joint band/rate allocation and
//! the Newton path-following loop that solves it.
//!
//! Normalized decision variables per user, laid out as
//! `[served piece rates r~ (L), (rate r_j, bandwidth b_j) per band (2M)]`:
//!
//! * `0 <= r~_l <= rho_l` - served rate per reward piece
//! * `sum_l r~_l <= sum_j r_j` - cannot serve more than is transmitted
//! * `sum_j c_j b_j phi(r_j/b_j) <= 1` - transmit power budget
//! * `r_j <= qcap_j b_j` - per-band spectral-efficiency (PSD) ceiling
//! * `r_j, b_j >= 0`, optional `sum_j b_j <= cap`
//!
//! with the equality constraints `sum_i b_ij = B_j` per band. `phi` is the
//! inverse spectral-efficiency curve `2^(q-shift) - 1`.

use std::f64::consts::LN_2;

use crate::multiband::linalg::{lu_factor, DenseMatrix};
use crate::multiband::newton::{solve_kkt, KernelUser};
use crate::multiband::IpmConfig;
use crate::{Error, Result};

/// Relative diagonal regularization added to the Hessian blocks.
const HESS_REG: f64 = 1e-10;

/// One user of the normalized problem. Peak power is scaled to 1.
#[derive(Debug, Clone)]
pub(super) struct NormUser {
    /// Reward piece widths (normalized rate units), oldest piece first.
    pub rho: Vec<f64>,
    /// Objective slope per piece (normalized, max over problem is 1).
    pub slope: Vec<f64>,
    /// Per-band power scale: transmit power = cpow_j * b_j * phi(r_j/b_j).
    pub cpow: Vec<f64>,
    /// Per-band spectral-efficiency ceiling from the PSD cap.
    pub qcap: Vec<f64>,
    /// Optional total-bandwidth cap (normalized).
    pub cap: Option<f64>,
}

impl NormUser {
    pub fn pieces(&self) -> usize {
        self.rho.len()
    }

    pub fn bands(&self) -> usize {
        self.cpow.len()
    }

    pub fn dim(&self) -> usize {
        self.pieces() + 2 * self.bands()
    }

    pub fn idx_r(&self, j: usize) -> usize {
        self.pieces() + 2 * j
    }

    pub fn idx_b(&self, j: usize) -> usize {
        self.pieces() + 2 * j + 1
    }

    /// Number of inequality constraints carried by this user's barrier.
    pub fn constraint_count(&self) -> usize {
        2 * self.pieces() + 3 * self.bands() + 2 + usize::from(self.cap.is_some())
    }
}

#[derive(Debug, Clone)]
pub(super) struct NormProblem {
    pub users: Vec<NormUser>,
    /// Band bandwidths, normalized so the largest is 1.
    pub band_bw: Vec<f64>,
    /// Exponent shift in phi: 0 for the spectral-efficiency form, 1 for
    /// the shifted-exponent variant.
    pub shift: f64,
}

/// phi, phi', phi'' at spectral efficiency q.
fn phi(shift: f64, q: f64) -> (f64, f64, f64) {
    let e = (q - shift).exp2();
    (e - 1.0, LN_2 * e, LN_2 * LN_2 * e)
}

/// Slack values and power-curve evaluations reused by value, gradient and
/// Hessian computations. `None` means the point is out of the domain.
struct UserPoint {
    coupling: f64,
    power: f64,
    cap: Option<f64>,
    qslack: Vec<f64>,
    q: Vec<f64>,
    phi: Vec<(f64, f64, f64)>,
}

impl NormProblem {
    pub fn bands(&self) -> usize {
        self.band_bw.len()
    }

    pub fn constraint_count(&self) -> usize {
        self.users.iter().map(|u| u.constraint_count()).sum()
    }

    fn point(&self, u: &NormUser, x: &[f64]) -> Option<UserPoint> {
        let m = u.bands();
        for l in 0..u.pieces() {
            if !(x[l] > 0.0) || !(u.rho[l] - x[l] > 0.0) {
                return None;
            }
        }
        let mut q = Vec::with_capacity(m);
        let mut ph = Vec::with_capacity(m);
        let mut qslack = Vec::with_capacity(m);
        let mut power_used = 0.0;
        let mut rate_total = 0.0;
        let mut bw_total = 0.0;
        for j in 0..m {
            let (r, b) = (x[u.idx_r(j)], x[u.idx_b(j)]);
            if !(r > 0.0) || !(b > 0.0) {
                return None;
            }
            let qj = r / b;
            let pj = phi(self.shift, qj);
            power_used += u.cpow[j] * b * pj.0;
            rate_total += r;
            bw_total += b;
            qslack.push(u.qcap[j] * b - r);
            q.push(qj);
            ph.push(pj);
        }
        let served: f64 = x[..u.pieces()].iter().sum();
        let p = UserPoint {
            coupling: rate_total - served,
            power: 1.0 - power_used,
            cap: u.cap.map(|c| c - bw_total),
            qslack,
            q,
            phi: ph,
        };
        let ok = p.coupling > 0.0
            && p.power > 0.0
            && p.cap.map_or(true, |s| s > 0.0)
            && p.qslack.iter().all(|&s| s > 0.0);
        ok.then_some(p)
    }

    /// Normalized objective (to maximize).
    pub fn objective(&self, x: &[Vec<f64>]) -> f64 {
        self.users
            .iter()
            .zip(x)
            .map(|(u, xi)| u.slope.iter().zip(xi).map(|(s, r)| s * r).sum::<f64>())
            .sum()
    }

    /// Barrier-augmented value F_t = -t * objective + sum(-log slack).
    /// `None` outside the domain.
    pub fn value(&self, t: f64, x: &[Vec<f64>]) -> Option<f64> {
        let mut total = -t * self.objective(x);
        for (u, xi) in self.users.iter().zip(x) {
            let p = self.point(u, xi)?;
            for l in 0..u.pieces() {
                total -= xi[l].ln() + (u.rho[l] - xi[l]).ln();
            }
            total -= p.coupling.ln() + p.power.ln();
            if let Some(s) = p.cap {
                total -= s.ln();
            }
            for j in 0..u.bands() {
                total -= xi[u.idx_r(j)].ln() + xi[u.idx_b(j)].ln() + p.qslack[j].ln();
            }
        }
        Some(total)
    }

    pub fn is_feasible(&self, x: &[Vec<f64>]) -> bool {
        self.users
            .iter()
            .zip(x)
            .all(|(u, xi)| self.point(u, xi).is_some())
    }

    /// Gradient of F_t for one user.
    pub fn gradient(&self, u: &NormUser, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let p = self
            .point(u, x)
            .ok_or_else(|| Error::SolverFailure("gradient requested outside the domain".into()))?;
        let mut g = vec![0.0; u.dim()];
        for l in 0..u.pieces() {
            g[l] = -t * u.slope[l] - 1.0 / x[l] + 1.0 / (u.rho[l] - x[l]) + 1.0 / p.coupling;
        }
        for j in 0..u.bands() {
            let (r, b) = (x[u.idx_r(j)], x[u.idx_b(j)]);
            let (pv, pd, _) = p.phi[j];
            g[u.idx_r(j)] =
                -1.0 / p.coupling + u.cpow[j] * pd / p.power - 1.0 / r + 1.0 / p.qslack[j];
            g[u.idx_b(j)] = u.cpow[j] * (pv - p.q[j] * pd) / p.power
                - 1.0 / b
                - u.qcap[j] / p.qslack[j]
                + p.cap.map_or(0.0, |s| 1.0 / s);
        }
        Ok(g)
    }

    /// Structured Hessian of F_t for one user (the objective is linear, so
    /// this is the barrier Hessian), with a small diagonal regularization.
    pub fn hessian(&self, u: &NormUser, x: &[f64]) -> Result<KernelUser> {
        let p = self
            .point(u, x)
            .ok_or_else(|| Error::SolverFailure("Hessian requested outside the domain".into()))?;
        let (ls, m) = (u.pieces(), u.bands());
        let mut diag = Vec::with_capacity(ls);
        for l in 0..ls {
            let lo = x[l];
            let hi = u.rho[l] - x[l];
            diag.push(1.0 / (lo * lo) + 1.0 / (hi * hi));
        }
        let mut blocks = Vec::with_capacity(m);
        for j in 0..m {
            let (r, b) = (x[u.idx_r(j)], x[u.idx_b(j)]);
            let (_, _, pdd) = p.phi[j];
            let qj = p.q[j];
            let curve = u.cpow[j] * pdd / (b * p.power);
            let qs = p.qslack[j];
            let t_rr = 1.0 / (r * r) + curve + 1.0 / (qs * qs);
            let t_rb = -curve * qj - u.qcap[j] / (qs * qs);
            let t_bb = 1.0 / (b * b) + curve * qj * qj + u.qcap[j] * u.qcap[j] / (qs * qs);
            blocks.push([t_rr, t_rb, t_bb]);
        }
        let mut ranks = Vec::with_capacity(3);
        // Rate-coupling constraint.
        let mut col = vec![0.0; u.dim()];
        for c in col.iter_mut().take(ls) {
            *c = -1.0 / p.coupling;
        }
        for j in 0..m {
            col[u.idx_r(j)] = 1.0 / p.coupling;
        }
        ranks.push(col);
        // Power budget.
        let mut col = vec![0.0; u.dim()];
        for j in 0..m {
            let (pv, pd, _) = p.phi[j];
            col[u.idx_r(j)] = u.cpow[j] * pd / p.power;
            col[u.idx_b(j)] = u.cpow[j] * (pv - p.q[j] * pd) / p.power;
        }
        ranks.push(col);
        // Total-bandwidth cap, when present.
        if let Some(s) = p.cap {
            let mut col = vec![0.0; u.dim()];
            for j in 0..m {
                col[u.idx_b(j)] = 1.0 / s;
            }
            ranks.push(col);
        }
        // Mean-diagonal regularization keeps the block factorization away
        // from singular even when a barrier term vanishes.
        let trace: f64 =
            diag.iter().sum::<f64>() + blocks.iter().map(|b| b[0] + b[2]).sum::<f64>();
        let eps = HESS_REG * trace / u.dim() as f64;
        for d in &mut diag {
            *d += eps;
        }
        for b in &mut blocks {
            b[0] += eps;
            b[2] += eps;
        }
        Ok(KernelUser {
            diag,
            blocks,
            ranks,
        })
    }

    /// Largest step along `dx` keeping every affine slack positive. The
    /// power slack is the only non-affine one and is left to backtracking.
    fn affine_step_limit(&self, x: &[Vec<f64>], dx: &[Vec<f64>]) -> f64 {
        let mut limit = f64::INFINITY;
        let mut shrink = |slack: f64, deriv: f64| {
            if deriv < 0.0 {
                limit = limit.min(slack / -deriv);
            }
        };
        for (u, (xi, di)) in self.users.iter().zip(x.iter().zip(dx)) {
            let ls = u.pieces();
            for l in 0..ls {
                shrink(xi[l], di[l]);
                shrink(u.rho[l] - xi[l], -di[l]);
            }
            let mut coupling = -xi[..ls].iter().sum::<f64>();
            let mut d_coupling = -di[..ls].iter().sum::<f64>();
            let mut bw = 0.0;
            let mut d_bw = 0.0;
            for j in 0..u.bands() {
                let (ri, bi) = (u.idx_r(j), u.idx_b(j));
                shrink(xi[ri], di[ri]);
                shrink(xi[bi], di[bi]);
                shrink(u.qcap[j] * xi[bi] - xi[ri], u.qcap[j] * di[bi] - di[ri]);
                coupling += xi[ri];
                d_coupling += di[ri];
                bw += xi[bi];
                d_bw += di[bi];
            }
            shrink(coupling, d_coupling);
            if let Some(cap) = u.cap {
                shrink(cap - bw, -d_bw);
            }
        }
        limit
    }

    /// Strictly feasible start: bandwidth split proportional to effective
    /// caps, rates sized to use under a third of the power budget, served
    /// rates filling half the transmitted total.
    pub fn feasible_start(&self) -> Result<Vec<Vec<f64>>> {
        let total_bw: f64 = self.band_bw.iter().sum();
        let eff: Vec<f64> = self
            .users
            .iter()
            .map(|u| u.cap.unwrap_or(total_bw).min(total_bw))
            .collect();
        let eff_total: f64 = eff.iter().sum();
        if self.users.len() > 1 && eff_total <= total_bw * (1.0 + 1e-9) {
            return Err(Error::Infeasible(format!(
                "bandwidth caps absorb at most {eff_total:.6} of {total_bw:.6} normalized Hz"
            )));
        }
        let mut out = Vec::with_capacity(self.users.len());
        for (u, &e) in self.users.iter().zip(&eff) {
            let share = e / eff_total;
            let mut x = vec![0.0; u.dim()];
            let m = u.bands();
            let mut rate_total = 0.0;
            for j in 0..m {
                let b = self.band_bw[j] * share;
                // Power target per band: 0.3/M of the unit budget.
                let target = 0.3 / m as f64 / (u.cpow[j] * b);
                let q_pow = self.shift + (1.0 + target).log2();
                let q = (0.5 * u.qcap[j]).min(q_pow);
                x[u.idx_b(j)] = b;
                x[u.idx_r(j)] = q * b;
                rate_total += q * b;
            }
            if u.pieces() > 0 {
                let per_piece = 0.5 * rate_total / u.pieces() as f64;
                for l in 0..u.pieces() {
                    x[l] = (0.9 * u.rho[l]).min(per_piece);
                }
            }
            out.push(x);
        }
        if !self.is_feasible(&out) {
            return Err(Error::Infeasible(
                "could not construct a strictly feasible starting point".into(),
            ));
        }
        Ok(out)
    }
}

/// How the bordered Newton system is solved.
pub(super) trait KktBackend {
    fn solve(
        &mut self,
        hessians: &[KernelUser],
        grads: &[Vec<f64>],
        bands: usize,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)>;

    fn flops(&self) -> u64 {
        0
    }
}

/// Woodbury/Schur elimination, linear in the number of users.
#[derive(Default)]
pub(super) struct StructuredBackend {
    pub flops: u64,
}

impl KktBackend for StructuredBackend {
    fn solve(
        &mut self,
        hessians: &[KernelUser],
        grads: &[Vec<f64>],
        bands: usize,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        solve_kkt(hessians, grads, bands, &mut self.flops)
    }

    fn flops(&self) -> u64 {
        self.flops
    }
}

/// Reference path: assemble the full KKT matrix and solve it densely.
#[derive(Default)]
pub(super) struct DenseBackend;

impl KktBackend for DenseBackend {
    fn solve(
        &mut self,
        hessians: &[KernelUser],
        grads: &[Vec<f64>],
        bands: usize,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let offsets: Vec<usize> = hessians
            .iter()
            .scan(0usize, |acc, u| {
                let off = *acc;
                *acc += u.dim();
                Some(off)
            })
            .collect();
        let nx: usize = hessians.iter().map(|u| u.dim()).sum();
        let n = nx + bands;
        let mut kkt = DenseMatrix::zeros(n);
        for (u, &off) in hessians.iter().zip(&offsets) {
            let ns = u.diag.len();
            for (l, &d) in u.diag.iter().enumerate() {
                kkt.add_at(off + l, off + l, d);
            }
            for (j, blk) in u.blocks.iter().enumerate() {
                let r = off + ns + 2 * j;
                kkt.add_at(r, r, blk[0]);
                kkt.add_at(r, r + 1, blk[1]);
                kkt.add_at(r + 1, r, blk[1]);
                kkt.add_at(r + 1, r + 1, blk[2]);
            }
            for col in &u.ranks {
                for (i, &a) in col.iter().enumerate() {
                    for (j, &b) in col.iter().enumerate() {
                        kkt.add_at(off + i, off + j, a * b);
                    }
                }
            }
            for j in 0..bands {
                let bi = off + u.bandwidth_index(j);
                kkt.add_at(nx + j, bi, 1.0);
                kkt.add_at(bi, nx + j, 1.0);
            }
        }
        let mut rhs: Vec<f64> = grads.iter().flatten().map(|g| -g).collect();
        rhs.extend(std::iter::repeat(0.0).take(bands));
        let mut flops = 0;
        let lu = lu_factor(kkt, &mut flops)?;
        let sol = lu.solve(&rhs, &mut flops);
        let mut dx = Vec::with_capacity(hessians.len());
        for (u, &off) in hessians.iter().zip(&offsets) {
            dx.push(sol[off..off + u.dim()].to_vec());
        }
        Ok((dx, sol[nx..].to_vec()))
    }
}

/// Result of the path-following loop, still in normalized units.
pub(super) struct IpmOutcome {
    pub x: Vec<Vec<f64>>,
    /// Equality multipliers scaled to the original objective (band prices).
    pub band_prices: Vec<f64>,
    pub gap: f64,
    pub rounds: usize,
    pub newton_iters: usize,
    pub round_objectives: Vec<f64>,
}

pub(super) fn run_ipm(
    prob: &NormProblem,
    cfg: &IpmConfig,
    backend: &mut dyn KktBackend,
) -> Result<IpmOutcome> {
    let mut x = prob.feasible_start()?;
    let bands = prob.bands();
    let m_total = prob.constraint_count() as f64;
    let mut t = cfg.initial_barrier;
    let mut newton_iters = 0;
    let mut rounds = 0;
    let mut last_dy = vec![0.0; bands];
    let mut last_t = t;
    let mut round_objectives = Vec::new();
    let mut gap = f64::INFINITY;
    for _ in 0..cfg.max_barrier_rounds {
        rounds += 1;
        for _ in 0..cfg.max_newton_iters {
            let mut grads = Vec::with_capacity(prob.users.len());
            let mut hessians = Vec::with_capacity(prob.users.len());
            for (u, xi) in prob.users.iter().zip(&x) {
                grads.push(prob.gradient(u, t, xi)?);
                hessians.push(prob.hessian(u, xi)?);
            }
            let (dx, dy) = backend.solve(&hessians, &grads, bands)?;
            last_dy = dy;
            last_t = t;
            let decrement: f64 = -grads
                .iter()
                .zip(&dx)
                .map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>();
            if decrement * 0.5 <= cfg.newton_tol {
                break;
            }
            newton_iters += 1;
            let mut alpha = (0.99 * prob.affine_step_limit(&x, &dx)).min(1.0);
            let f0 = prob
                .value(t, &x)
                .ok_or_else(|| Error::SolverFailure("iterate left the domain".into()))?;
            let mut accepted = false;
            while alpha > 1e-16 {
                let cand: Vec<Vec<f64>> = x
                    .iter()
                    .zip(&dx)
                    .map(|(xi, di)| xi.iter().zip(di).map(|(a, b)| a + alpha * b).collect())
                    .collect();
                if let Some(f1) = prob.value(t, &cand) {
                    if f1 <= f0 - cfg.armijo * alpha * decrement {
                        x = cand;
                        accepted = true;
                        break;
                    }
                }
                alpha *= cfg.backtrack;
            }
            if !accepted {
                // Step size underflow: the iterate is at numerical
                // stationarity for this t.
                break;
            }
        }
        let obj = prob.objective(&x);
        round_objectives.push(obj);
        gap = m_total / t;
        if gap <= cfg.gap_tol * obj.abs().max(1.0) {
            break;
        }
        t *= cfg.barrier_scale_step;
    }
    let obj = prob.objective(&x);
    if gap > 10.0 * cfg.gap_tol * obj.abs().max(1.0) {
        return Err(Error::SolverFailure(format!(
            "barrier loop stalled at duality gap {gap:.3e} after {rounds} rounds"
        )));
    }
    let band_prices = last_dy.iter().map(|y| y / last_t).collect();
    Ok(IpmOutcome {
        x,
        band_prices,
        gap,
        rounds,
        newton_iters,
        round_objectives,
    })
}
