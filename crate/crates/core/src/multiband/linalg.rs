//! Minimal dense linear algebra: row-major matrices and a partial-pivot LU
//! factorization. Sized for the small systems this crate solves directly
//! (band-price Schur complements and reference KKT systems); no attempt at
//! blocking or SIMD.

use crate::{Error, Result};

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::SolverFailure(format!(
                "matrix data has {} entries, expected {}",
                data.len(),
                n * n
            )));
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }

    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
    }

    /// y = A x.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| {
                let row = &self.data[i * self.n..(i + 1) * self.n];
                row.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect()
    }
}

/// LU factors of a square matrix with partial pivoting: PA = LU.
#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    /// L below the diagonal (unit diagonal implied), U on and above.
    lu: Vec<f64>,
    /// Row permutation: factored row i came from input row perm[i].
    perm: Vec<usize>,
}

/// Factor `a` in place with partial pivoting. Fails on (numerically)
/// singular input. `flops` is advanced by the multiply-add count.
pub fn lu_factor(a: DenseMatrix, flops: &mut u64) -> Result<LuFactors> {
    let n = a.n;
    let mut lu = a.data;
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut pivot_row = k;
        let mut pivot_val = lu[k * n + k].abs();
        for i in k + 1..n {
            let v = lu[i * n + k].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = i;
            }
        }
        if !(pivot_val > 0.0) || !pivot_val.is_finite() {
            return Err(Error::SolverFailure(format!(
                "singular matrix at elimination step {k}"
            )));
        }
        if pivot_row != k {
            perm.swap(k, pivot_row);
            for j in 0..n {
                lu.swap(k * n + j, pivot_row * n + j);
            }
        }
        let pivot = lu[k * n + k];
        for i in k + 1..n {
            let m = lu[i * n + k] / pivot;
            lu[i * n + k] = m;
            for j in k + 1..n {
                lu[i * n + j] -= m * lu[k * n + j];
            }
        }
        *flops += ((n - k - 1) * (n - k)) as u64;
    }
    Ok(LuFactors { n, lu, perm })
}

impl LuFactors {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Solve A x = b.
    pub fn solve(&self, b: &[f64], flops: &mut u64) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        // Forward substitution with unit-diagonal L.
        for i in 0..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc;
        }
        // Back substitution with U.
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc / self.lu[i * n + i];
        }
        *flops += (n * n) as u64;
        x
    }
}
