//! Structured solve of the equality-bordered Newton system.
//!
//! Each user's barrier Hessian splits into a block-diagonal part (scalar
//! entries for the served-rate pieces, one 2x2 block per band's
//! rate/bandwidth pair) plus at most three rank-one terms: rate coupling,
//! power budget, total-bandwidth cap. The bordered system
//!
//! ```text
//!   [H  A^T] [dx]   [-g]
//!   [A   0 ] [dy] = [ 0]
//! ```
//!
//! with A summing each band's bandwidth entries across users is solved by
//! Woodbury inversion of every user block and an M x M Schur complement in
//! the band multipliers. Cost is linear in the number of users for fixed
//! band and piece counts.

use crate::multiband::linalg::{lu_factor, DenseMatrix, LuFactors};
use crate::Result;

/// One user's Hessian in structured form: H = B + sum_k u_k u_k^T, with B
/// block-diagonal as described at module level.
#[derive(Debug, Clone)]
pub struct KernelUser {
    /// Scalar diagonal for the leading variables.
    pub diag: Vec<f64>,
    /// Symmetric 2x2 blocks `[t_rr, t_rb, t_bb]`, one per band, laid out
    /// after the scalars as pairs.
    pub blocks: Vec<[f64; 3]>,
    /// Rank-one update columns u_k, each of full user dimension.
    pub ranks: Vec<Vec<f64>>,
}

impl KernelUser {
    pub fn dim(&self) -> usize {
        self.diag.len() + 2 * self.blocks.len()
    }

    /// Index of the bandwidth variable of band `j`.
    pub fn bandwidth_index(&self, j: usize) -> usize {
        self.diag.len() + 2 * j + 1
    }
}

struct FactoredUser {
    inv_diag: Vec<f64>,
    /// Inverses of the 2x2 blocks, same packing as the input.
    inv_blocks: Vec<[f64; 3]>,
    /// W = B^{-1} U, one column per rank update.
    w: Vec<Vec<f64>>,
    /// LU of the Woodbury core C = I + U^T W.
    core: Option<LuFactors>,
}

fn factor(user: &KernelUser, flops: &mut u64) -> Result<FactoredUser> {
    let mut inv_diag = Vec::with_capacity(user.diag.len());
    for &d in &user.diag {
        if !(d > 0.0) || !d.is_finite() {
            return Err(crate::Error::SolverFailure(format!(
                "scalar Hessian entry is not positive: {d}"
            )));
        }
        inv_diag.push(1.0 / d);
    }
    let mut inv_blocks = Vec::with_capacity(user.blocks.len());
    for blk in &user.blocks {
        let [a, b, c] = *blk;
        let det = a * c - b * b;
        if !(a > 0.0) || !(det > 0.0) || !det.is_finite() {
            return Err(crate::Error::SolverFailure(format!(
                "band Hessian block is not positive definite: [{a}, {b}; {b}, {c}]"
            )));
        }
        inv_blocks.push([c / det, -b / det, a / det]);
    }
    *flops += (user.diag.len() + 8 * user.blocks.len()) as u64;
    let mut fu = FactoredUser {
        inv_diag,
        inv_blocks,
        w: Vec::new(),
        core: None,
    };
    let k = user.ranks.len();
    if k > 0 {
        fu.w = user.ranks.iter().map(|u| binv_apply(&fu, u, flops)).collect();
        let mut core = DenseMatrix::zeros(k);
        for (i, u) in user.ranks.iter().enumerate() {
            for (j, w) in fu.w.iter().enumerate() {
                let dot: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
                *core.at_mut(i, j) = dot + if i == j { 1.0 } else { 0.0 };
            }
        }
        *flops += (k * k * user.dim()) as u64;
        fu.core = Some(lu_factor(core, flops)?);
    }
    Ok(fu)
}

/// w = B^{-1} v.
fn binv_apply(f: &FactoredUser, v: &[f64], flops: &mut u64) -> Vec<f64> {
    let ns = f.inv_diag.len();
    let mut out = Vec::with_capacity(v.len());
    for (x, d) in v[..ns].iter().zip(&f.inv_diag) {
        out.push(x * d);
    }
    for (j, inv) in f.inv_blocks.iter().enumerate() {
        let (r, b) = (v[ns + 2 * j], v[ns + 2 * j + 1]);
        out.push(inv[0] * r + inv[1] * b);
        out.push(inv[1] * r + inv[2] * b);
    }
    *flops += (ns + 6 * f.inv_blocks.len()) as u64;
    out
}

/// x = H^{-1} v via the Woodbury identity.
fn hinv_apply(f: &FactoredUser, v: &[f64], flops: &mut u64) -> Vec<f64> {
    let mut out = binv_apply(f, v, flops);
    if let Some(core) = &f.core {
        let z: Vec<f64> = f
            .w
            .iter()
            .map(|w| w.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect();
        let s = core.solve(&z, flops);
        for (w, si) in f.w.iter().zip(&s) {
            for (o, wi) in out.iter_mut().zip(w) {
                *o -= si * wi;
            }
        }
        *flops += (2 * f.w.len() * v.len()) as u64;
    }
    out
}

/// Solve the bordered Newton system for all users at once. `grads` holds
/// each user's gradient g_i; the step keeps `A dx = 0`, i.e. band totals
/// unabridged. Returns per-user steps and the band multiplier step.
pub fn solve_kkt(
    users: &[KernelUser],
    grads: &[Vec<f64>],
    bands: usize,
    flops: &mut u64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    assert_eq!(users.len(), grads.len());
    let mut schur = DenseMatrix::zeros(bands);
    let mut rhs = vec![0.0; bands];
    let mut steps: Vec<Vec<f64>> = Vec::with_capacity(users.len());
    let mut band_cols: Vec<Vec<Vec<f64>>> = Vec::with_capacity(users.len());
    for (user, g) in users.iter().zip(grads) {
        assert_eq!(user.blocks.len(), bands);
        assert_eq!(g.len(), user.dim());
        let f = factor(user, flops)?;
        let neg_g: Vec<f64> = g.iter().map(|x| -x).collect();
        let v = hinv_apply(&f, &neg_g, flops);
        let mut cols = Vec::with_capacity(bands);
        for j in 0..bands {
            let mut e = vec![0.0; user.dim()];
            e[user.bandwidth_index(j)] = 1.0;
            let h = hinv_apply(&f, &e, flops);
            for j2 in 0..bands {
                schur.add_at(j2, j, h[user.bandwidth_index(j2)]);
            }
            cols.push(h);
        }
        for j2 in 0..bands {
            rhs[j2] += v[user.bandwidth_index(j2)];
        }
        steps.push(v);
        band_cols.push(cols);
    }
    let lu = lu_factor(schur, flops)?;
    let dy = lu.solve(&rhs, flops);
    for (v, cols) in steps.iter_mut().zip(&band_cols) {
        for (j, col) in cols.iter().enumerate() {
            let step = dy[j];
            for (vi, ci) in v.iter_mut().zip(col) {
                *vi -= step * ci;
            }
        }
    }
    *flops += steps.iter().map(|v| (v.len() * bands) as u64).sum::<u64>();
    Ok((steps, dy))
}
