//! Linear algebra for transient rate matrices.
//!
//! `M = -Q_C` is a nonsingular M-matrix whose row sums are the exit rates to
//! the absorbing state. [`MMatrixLu`] factors it by banded Gaussian
//! elimination in the Grassmann–Taksar–Heyman style: diagonal entries are
//! never formed by subtraction but rebuilt from the tracked row sums, so every
//! step adds nonnegative quantities. This keeps mean extinction times of order
//! `1e12` and decay rates of order `1e-12` accurate to working precision.

use crate::error::{Error, Result};
use crate::model::{ModelParams, StateSpace, TransitionSchema};

/// Transient part of the generator in compressed row form.
///
/// Off-diagonal rates are stored as nonnegative values; the diagonal is
/// `-(row off-diagonal sum + exit rate)`.
#[derive(Debug, Clone)]
pub struct SparseRateMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    exit: Vec<f64>,
}

/// Upper bound on stored nonzeros for an exact solve.
pub const MAX_NONZEROS: usize = 5_000_000;

impl SparseRateMatrix {
    /// Assembles `Q_C` over the transient states of `params`.
    pub fn assemble(params: &ModelParams) -> Result<Self> {
        let space = StateSpace::for_params(params)?;
        let schema = TransitionSchema::new(params);
        let n = space.size();
        let n_events = schema.events().len();
        if n.saturating_mul(n_events) > MAX_NONZEROS {
            return Err(Error::TooLarge { size: n.saturating_mul(n_events), limit: MAX_NONZEROS });
        }
        let k = space.k();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(n * n_events);
        let mut vals = Vec::with_capacity(n * n_events);
        let mut exit = vec![0.0; n];
        let mut state = vec![0u32; k];
        let mut target = vec![0u32; k];
        row_ptr.push(0);
        for (row, exit_row) in exit.iter_mut().enumerate() {
            space.unrank_into(row, &mut state);
            for (e, event) in schema.events().iter().enumerate() {
                let rate = schema.rate(e, &state);
                if rate <= 0.0 {
                    continue;
                }
                for m in 0..k {
                    target[m] = (state[m] as i64 + event.delta[m] as i64) as u32;
                }
                if target.iter().all(|&c| c == 0) {
                    *exit_row += rate;
                } else {
                    cols.push(space.rank_unchecked(&target));
                    vals.push(rate);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Self { n, row_ptr, cols, vals, exit })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len() + self.n
    }

    /// Rate of leaving each transient state straight into the absorbing state.
    pub fn exit_rates(&self) -> &[f64] {
        &self.exit
    }

    /// Off-diagonal entries of row `i` as `(column, rate)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    /// Diagonal entry `Q_C[i][i]`.
    pub fn diag(&self, i: usize) -> f64 {
        -(self.row(i).map(|(_, v)| v).sum::<f64>() + self.exit[i])
    }

    /// `Q_C x`.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.diag(i) * x[i] + self.row(i).map(|(j, v)| v * x[j]).sum::<f64>())
            .collect()
    }

    /// `x^T Q_C` as a column vector.
    pub fn mul_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = (0..self.n).map(|i| self.diag(i) * x[i]).collect();
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                out[j] += v * x[i];
            }
        }
        out
    }

    /// Largest `|i - j|` over stored entries below and above the diagonal.
    pub fn bandwidths(&self) -> (usize, usize) {
        let (mut lo, mut hi) = (0, 0);
        for i in 0..self.n {
            for (j, _) in self.row(i) {
                if j < i {
                    lo = lo.max(i - j);
                } else {
                    hi = hi.max(j - i);
                }
            }
        }
        (lo, hi)
    }

    /// Infinity norm of `Q_C`.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n).map(|i| 2.0 * self.diag(i).abs()).fold(0.0, f64::max)
    }
}

/// Band storage limit (doubles) for [`MMatrixLu`].
pub const MAX_BAND_ENTRIES: usize = 60_000_000;

/// Banded LU of `M = -Q_C` computed without subtractive cancellation.
///
/// `L` is unit lower triangular with nonpositive multipliers, `U` upper
/// triangular with positive diagonal and nonpositive off-diagonal entries.
#[derive(Debug, Clone)]
pub struct MMatrixLu {
    n: usize,
    lo: usize,
    hi: usize,
    band: Vec<f64>,
}

impl MMatrixLu {
    pub fn factor(q: &SparseRateMatrix) -> Result<Self> {
        let n = q.dim();
        let (lo, hi) = q.bandwidths();
        let width = lo + hi + 1;
        if n.saturating_mul(width) > MAX_BAND_ENTRIES {
            return Err(Error::TooLarge { size: n.saturating_mul(width), limit: MAX_BAND_ENTRIES });
        }
        let mut band = vec![0.0; n * width];
        // band holds M's off-diagonals (<= 0); row sums live in `sums`
        for i in 0..n {
            for (j, v) in q.row(i) {
                band[i * width + j + lo - i] -= v;
            }
        }
        let mut sums = q.exit_rates().to_vec();
        for p in 0..n {
            let prow = p * width + lo - p;
            let last = (p + hi).min(n - 1);
            let mut pivot = sums[p];
            for j in p + 1..=last {
                pivot -= band[prow + j];
            }
            if !(pivot > 0.0 && pivot.is_finite()) {
                return Err(Error::NumericalFailure { what: "M-matrix elimination", residual: pivot });
            }
            band[prow + p] = pivot;
            for i in p + 1..=(p + lo).min(n - 1) {
                let irow = i * width + lo - i;
                let m_ip = band[irow + p];
                if m_ip == 0.0 {
                    continue;
                }
                let l = m_ip / pivot;
                band[irow + p] = l;
                sums[i] -= l * sums[p];
                for j in p + 1..=last {
                    if j != i {
                        band[irow + j] -= l * band[prow + j];
                    }
                }
            }
        }
        Ok(Self { n, lo, hi, band })
    }

    fn width(&self) -> usize {
        self.lo + self.hi + 1
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.band[i * self.width() + j + self.lo - i]
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `M x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in 0..n {
            let mut acc = x[i];
            for p in i.saturating_sub(self.lo)..i {
                acc -= self.at(i, p) * x[p];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..=(i + self.hi).min(n - 1) {
                acc -= self.at(i, j) * x[j];
            }
            x[i] = acc / self.at(i, i);
        }
        x
    }

    /// Solves `M^T x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for j in 0..n {
            let mut acc = x[j];
            for i in j.saturating_sub(self.hi)..j {
                acc -= self.at(i, j) * x[i];
            }
            x[j] = acc / self.at(j, j);
        }
        for p in (0..n).rev() {
            let mut acc = x[p];
            for i in p + 1..=(p + self.lo).min(n - 1) {
                acc -= self.at(i, p) * x[i];
            }
            x[p] = acc;
        }
        x
    }
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone)]
pub struct IterativeSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Jacobi-preconditioned BiCGSTAB for `A x = b`.
///
/// `apply` computes `A v`; `diag` is the diagonal of `A`.
pub fn bicgstab<F>(
    apply: F,
    diag: &[f64],
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<IterativeSolution>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(IterativeSolution { x: vec![0.0; n], iterations: 0, relative_residual: 0.0 });
    }
    let inv: Vec<f64> = diag.iter().map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&inv).map(|(a, b)| a * b).collect() };
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut rel = 1.0;
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let p_hat = precond(&p);
        v = apply(&p_hat);
        let denom = dot(&r_hat, &v);
        if denom == 0.0 {
            break;
        }
        alpha = rho / denom;
        let s: Vec<f64> = r.iter().zip(&v).map(|(r, v)| r - alpha * v).collect();
        if norm(&s) / bnorm < tol {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            let res = residual(&apply, &x, b) / bnorm;
            return Ok(IterativeSolution { x, iterations: it, relative_residual: res });
        }
        let s_hat = precond(&s);
        let t = apply(&s_hat);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        rel = norm(&r) / bnorm;
        if rel < tol {
            let res = residual(&apply, &x, b) / bnorm;
            return Ok(IterativeSolution { x, iterations: it, relative_residual: res });
        }
    }
    Err(Error::NumericalFailure { what: "BiCGSTAB", residual: rel })
}

fn residual<F: Fn(&[f64]) -> Vec<f64>>(apply: &F, x: &[f64], b: &[f64]) -> f64 {
    let ax = apply(x);
    norm(&ax.iter().zip(b).map(|(a, b)| a - b).collect::<Vec<_>>())
}

/// Solves a tridiagonal system in place (Thomas algorithm).
///
/// `lower[i]` multiplies `x[i-1]` in row `i`, `upper[i]` multiplies `x[i+1]`.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return Err(Error::NumericalFailure { what: "tridiagonal solve", residual: f64::INFINITY });
    }
    c[0] = if n > 1 { upper[0] / denom } else { 0.0 };
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c[i - 1];
        if denom == 0.0 {
            return Err(Error::NumericalFailure { what: "tridiagonal solve", residual: f64::INFINITY });
        }
        if i + 1 < n {
            c[i] = upper[i] / denom;
        }
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}
