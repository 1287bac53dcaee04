//! Exact mean extinction times and the quasi-stationary distribution.

use log::debug;

use crate::error::{Error, Result};
use crate::linalg::{bicgstab, MMatrixLu, SparseRateMatrix};
use crate::model::{ModelParams, StateSpace};

const SOLVE_TOL: f64 = 1e-10;
const EIGEN_TOL: f64 = 1e-12;
const EIGEN_MAX_ITER: usize = 20_000;

/// Either a band factorization of `-Q_C` or the matrix for iterative solves.
enum Solver<'a> {
    Direct(MMatrixLu),
    Iterative(&'a SparseRateMatrix, Vec<f64>),
}

impl<'a> Solver<'a> {
    fn new(q: &'a SparseRateMatrix) -> Result<Self> {
        match MMatrixLu::factor(q) {
            Ok(lu) => Ok(Solver::Direct(lu)),
            Err(Error::TooLarge { size, .. }) => {
                debug!("band storage {size} too large, falling back to BiCGSTAB");
                let diag = (0..q.dim()).map(|i| -q.diag(i)).collect();
                Ok(Solver::Iterative(q, diag))
            }
            Err(e) => Err(e),
        }
    }

    /// `x` with `-Q_C x = b`.
    fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match self {
            Solver::Direct(lu) => Ok(lu.solve(b)),
            Solver::Iterative(q, diag) => {
                let apply = |v: &[f64]| q.mul(v).into_iter().map(|x| -x).collect::<Vec<_>>();
                Ok(bicgstab(apply, diag, b, SOLVE_TOL * 1e-2, 50_000)?.x)
            }
        }
    }

    /// `x` with `-Q_C^T x = b`.
    fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        match self {
            Solver::Direct(lu) => Ok(lu.solve_transpose(b)),
            Solver::Iterative(q, diag) => {
                let apply = |v: &[f64]| q.mul_transpose(v).into_iter().map(|x| -x).collect::<Vec<_>>();
                Ok(bicgstab(apply, diag, b, SOLVE_TOL * 1e-2, 50_000)?.x)
            }
        }
    }
}

/// Mean time to extinction from every transient state, in [`StateSpace`]
/// index order. Solves `Q_C tau = -1`.
pub fn mean_extinction_times(params: &ModelParams) -> Result<Vec<f64>> {
    let q = SparseRateMatrix::assemble(params)?;
    let solver = Solver::new(&q)?;
    let tau = solver.solve(&vec![1.0; q.dim()])?;
    let qt = q.mul(&tau);
    let res = qt.iter().map(|v| (v + 1.0).abs()).fold(0.0, f64::max);
    let scale = q.norm_inf() * tau.iter().fold(0.0f64, |m, &t| m.max(t.abs())) + 1.0;
    let rel = res / scale;
    if !(rel < SOLVE_TOL) || tau.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::NumericalFailure { what: "mean extinction time solve", residual: rel });
    }
    Ok(tau)
}

/// Mean extinction time from one initial state.
pub fn mean_extinction_time_from(params: &ModelParams, state: &[u32]) -> Result<f64> {
    let space = StateSpace::for_params(params)?;
    let j = space.rank(state)?;
    Ok(mean_extinction_times(params)?[j])
}

/// Closed-form mean extinction time of the classic SIS chain from `i`
/// infectives.
///
/// Uses `tau_i = (1/gamma) sum_{m<=i} T_m` with the backward recursion
/// `T_N = 1/N`, `T_m = 1/m + R0 (N - m)/N T_{m+1}`, which is the double sum
/// with each inner product accumulated by running multiplication.
pub fn norden_tau(params: &ModelParams, i: u32) -> Result<f64> {
    if i == 0 || i > params.n_pop {
        return Err(Error::InvalidArgument(format!(
            "initial infectives {i} outside 1..={}",
            params.n_pop
        )));
    }
    Ok(norden_all(params)?[i as usize - 1])
}

/// [`norden_tau`] for every `i = 1..=N`.
pub fn norden_all(params: &ModelParams) -> Result<Vec<f64>> {
    if params.k_stages != 1 {
        return Err(Error::NotApplicable {
            method: "Norden formula",
            reason: "only the classic (k = 1) model has this closed form".into(),
        });
    }
    let n = params.n_pop as usize;
    let nf = params.n();
    let r0 = params.r0();
    let mut inner = vec![0.0; n + 1];
    inner[n] = 1.0 / nf;
    for m in (1..n).rev() {
        inner[m] = 1.0 / m as f64 + r0 * (nf - m as f64) / nf * inner[m + 1];
    }
    let mut out = Vec::with_capacity(n);
    let mut acc = 0.0;
    for t in &inner[1..] {
        acc += t;
        out.push(acc / params.gamma);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Overflow("Norden formula"));
    }
    Ok(out)
}

/// Quasi-stationary distribution with its decay rate.
#[derive(Debug, Clone)]
pub struct QsdResult {
    /// Probabilities over transient states in [`StateSpace`] index order.
    pub q: Vec<f64>,
    pub lambda: f64,
    pub tau_q: f64,
    /// `max |(q Q_C + lambda q)_i|`.
    pub residual: f64,
    pub iterations: usize,
    /// `sum_i q_i * (exit rate of i)`, the extinction flux.
    pub flux: f64,
}

impl QsdResult {
    /// Probability of `state` under the quasi-stationary distribution.
    pub fn prob(&self, space: &StateSpace, state: &[u32]) -> Result<f64> {
        Ok(self.q[space.rank(state)?])
    }

    /// Index of the most probable state.
    pub fn mode(&self) -> usize {
        self.q
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }
}

/// Quasi-stationary distribution by inverse iteration on `Q_C^T` with zero
/// shift, started from the uniform vector.
pub fn quasi_stationary(params: &ModelParams) -> Result<QsdResult> {
    let n = StateSpace::for_params(params)?.size();
    quasi_stationary_from(params, &vec![1.0; n])
}

/// As [`quasi_stationary`] from a caller-chosen nonnegative start vector.
pub fn quasi_stationary_from(params: &ModelParams, start: &[f64]) -> Result<QsdResult> {
    let q_mat = SparseRateMatrix::assemble(params)?;
    let n = q_mat.dim();
    if start.len() != n || start.iter().any(|&v| !(v >= 0.0)) || start.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidArgument("start vector must be nonnegative and nonzero".into()));
    }
    let solver = Solver::new(&q_mat)?;
    let total: f64 = start.iter().sum();
    let mut q: Vec<f64> = start.iter().map(|v| v / total).collect();
    let mut lambda = f64::NAN;
    let mut change = f64::INFINITY;
    let mut iterations = 0;
    while iterations < EIGEN_MAX_ITER {
        iterations += 1;
        let x = solver.solve_transpose(&q)?;
        let s: f64 = x.iter().sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::NumericalFailure { what: "inverse iteration", residual: s });
        }
        lambda = 1.0 / s;
        change = 0.0;
        for (qi, xi) in q.iter_mut().zip(&x) {
            let v = xi / s;
            change = f64::max(change, (v - *qi).abs());
            *qi = v;
        }
        if change < EIGEN_TOL {
            break;
        }
    }
    if change >= EIGEN_TOL {
        return Err(Error::EigenNonConvergence { iterations, change });
    }
    let qq = q_mat.mul_transpose(&q);
    let residual = qq.iter().zip(&q).map(|(a, b)| (a + lambda * b).abs()).fold(0.0, f64::max);
    if !(residual < SOLVE_TOL * q_mat.norm_inf().max(1.0)) {
        return Err(Error::NumericalFailure { what: "quasi-stationary residual", residual });
    }
    let flux = q.iter().zip(q_mat.exit_rates()).map(|(a, b)| a * b).sum();
    debug!("QSD converged in {iterations} iterations, lambda = {lambda:e}");
    Ok(QsdResult { q, lambda, tau_q: 1.0 / lambda, residual, iterations, flux })
}
