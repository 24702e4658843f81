//! Dense helpers shared by the likelihood and integration code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Jitter multipliers (times the mean diagonal) tried after a failed factorization.
pub const JITTER_LEVELS: [f64; 3] = [1e-10, 1e-8, 1e-6];

/// Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    /// Lower factor; the strict upper triangle is zero.
    l: DMatrix<f64>,
    /// Absolute jitter added to the diagonal (0 when none was needed).
    pub jitter: f64,
}

/// In-place lower Cholesky on column-major storage. Returns false when a
/// pivot is not positive.
fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let (done, rest) = a.split_at_mut(j * n);
        let col = &mut rest[j..n];
        for k in 0..j {
            let ck = &done[k * n + j..k * n + n];
            let ljk = ck[0];
            if ljk != 0.0 {
                for (x, &y) in col.iter_mut().zip(ck) {
                    *x -= ljk * y;
                }
            }
        }
        let d = col[0];
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        col[0] = d;
        let inv = 1.0 / d;
        for x in &mut col[1..] {
            *x *= inv;
        }
    }
    for j in 0..n {
        for i in 0..j {
            a[j * n + i] = 0.0;
        }
    }
    true
}

fn factor(mut m: DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    cholesky_in_place(m.as_mut_slice(), n).then_some(m)
}

impl SpdFactor {
    /// Factorizes `m`, escalating diagonal jitter before giving up.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonPositiveDefinite { jitters: vec![] });
        }
        if let Some(l) = factor(m.clone()) {
            return Ok(SpdFactor { l, jitter: 0.0 });
        }
        let n = m.nrows();
        let mean_diag = (0..n).map(|i| m[(i, i)]).sum::<f64>() / n.max(1) as f64;
        let mut tried = Vec::new();
        for level in JITTER_LEVELS {
            let jitter = level * mean_diag.abs().max(f64::MIN_POSITIVE);
            tried.push(jitter);
            let mut mj = m.clone();
            for i in 0..n {
                mj[(i, i)] += jitter;
            }
            if let Some(l) = factor(mj) {
                return Ok(SpdFactor { l, jitter });
            }
        }
        Err(Error::NonPositiveDefinite { jitters: tried })
    }

    /// Factorizes without jitter; `None` when not positive definite.
    pub fn exact(m: DMatrix<f64>) -> Option<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return None;
        }
        factor(m).map(|l| SpdFactor { l, jitter: 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>()
    }

    /// Ratio of smallest to largest squared pivot, a cheap conditioning proxy.
    pub fn pivot_ratio(&self) -> f64 {
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..self.dim() {
            let d = self.l[(i, i)] * self.l[(i, i)];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if hi > 0.0 {
            lo / hi
        } else {
            0.0
        }
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.dim();
        let l = self.l.as_slice();
        // L y = b
        for k in 0..n {
            let col = &l[k * n + k..k * n + n];
            let xk = x[k] / col[0];
            x[k] = xk;
            for (xi, &lik) in x[k + 1..].iter_mut().zip(&col[1..]) {
                *xi -= lik * xk;
            }
        }
        // L^T x = y
        for k in (0..n).rev() {
            let col = &l[k * n + k..k * n + n];
            let dot: f64 = x[k + 1..].iter().zip(&col[1..]).map(|(a, b)| a * b).sum();
            x[k] = (x[k] - dot) / col[0];
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        let mut x = b.clone();
        for col in x.as_mut_slice().chunks_mut(n) {
            self.solve_in_place(col);
        }
        x
    }

    /// `C^{-1} = L^{-T} L^{-1}` from an explicit triangular inverse.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let l = self.l.as_slice();
        let mut linv = DMatrix::<f64>::zeros(n, n);
        {
            let w = linv.as_mut_slice();
            for c in 0..n {
                let x = &mut w[c * n..c * n + n];
                x[c] = 1.0;
                for k in c..n {
                    let col = &l[k * n + k..k * n + n];
                    let xk = x[k] / col[0];
                    x[k] = xk;
                    for (xi, &lik) in x[k + 1..].iter_mut().zip(&col[1..]) {
                        *xi -= lik * xk;
                    }
                }
            }
        }
        let w = linv.as_slice();
        let mut inv = DMatrix::<f64>::zeros(n, n);
        for a in 0..n {
            for b in 0..=a {
                let v: f64 = w[a * n + a..a * n + n].iter().zip(&w[b * n + a..b * n + n]).map(|(x, y)| x * y).sum();
                inv[(a, b)] = v;
                inv[(b, a)] = v;
            }
        }
        inv
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.l.clone()
    }
}

/// Copies the lower triangle onto the upper one.
pub fn symmetrize_lower(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// `sum_i row_i row_i^T` for the rows of `m`, exactly symmetric.
pub fn outer_sum(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.tr_mul(m);
    symmetrize_lower(&mut out);
    out
}

/// Neumaier-compensated sum of the values after sorting them, so the result
/// does not depend on the order in which the values were produced.
pub fn order_invariant_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values.iter() {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Column sums of `m` computed with [`order_invariant_sum`].
pub fn column_sums_invariant(m: &DMatrix<f64>) -> DVector<f64> {
    let mut buf = Vec::with_capacity(m.nrows());
    DVector::from_iterator(
        m.ncols(),
        (0..m.ncols()).map(|j| {
            buf.clear();
            buf.extend(m.column(j).iter().copied());
            order_invariant_sum(&mut buf)
        }),
    )
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}
