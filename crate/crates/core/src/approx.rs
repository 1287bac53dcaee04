//! Closed-form and asymptotic approximations to mean extinction times.
//!
//! Times are in the same units as `1/gamma`. Exponentially large estimates
//! are built in log form; [`ExtinctionEstimate::value`] materializes them and
//! may be `inf` where `ln_value` is still finite.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::roots::bracketed_root;

/// Euler's constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Exact,
    Det,
    Lin,
    Dss,
    Kl,
    Ad,
    Ou,
    Fpe,
    Bbn,
    HamiltonianAction,
    Diff,
    Mc,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Exact => "Exact",
            Method::Det => "Det",
            Method::Lin => "Lin",
            Method::Dss => "DSS",
            Method::Kl => "KL",
            Method::Ad => "AD",
            Method::Ou => "OU",
            Method::Fpe => "FPE",
            Method::Bbn => "BBN",
            Method::HamiltonianAction => "H",
            Method::Diff => "Diff",
            Method::Mc => "MC",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|m| m.tag().eq_ignore_ascii_case(tag))
    }

    pub const ALL: [Method; 12] = [
        Method::Exact,
        Method::Det,
        Method::Lin,
        Method::Dss,
        Method::Kl,
        Method::Ad,
        Method::Ou,
        Method::Fpe,
        Method::Bbn,
        Method::HamiltonianAction,
        Method::Diff,
        Method::Mc,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A labelled time estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtinctionEstimate {
    pub method: Method,
    /// Natural log of the time; `NaN` when the value is not positive.
    pub ln_value: f64,
    value: f64,
    pub std_error: Option<f64>,
    pub params: ModelParams,
}

impl ExtinctionEstimate {
    pub fn from_value(method: Method, value: f64, params: &ModelParams) -> Self {
        let ln_value = if value > 0.0 { value.ln() } else { f64::NAN };
        Self { method, ln_value, value, std_error: None, params: *params }
    }

    pub fn from_ln(method: Method, ln_value: f64, params: &ModelParams) -> Self {
        Self { method, ln_value, value: ln_value.exp(), std_error: None, params: *params }
    }

    pub fn with_std_error(mut self, se: f64) -> Self {
        self.std_error = Some(se);
        self
    }

    /// The time on a linear scale (`inf` if it overflows a double).
    pub fn value(&self) -> f64 {
        self.value
    }
}

fn require_below(params: &ModelParams, method: &'static str) -> Result<f64> {
    let r0 = params.r0();
    if r0 >= 1.0 {
        return Err(Error::NotApplicable { method, reason: format!("needs R0 < 1, got {r0}") });
    }
    Ok(r0)
}

fn require_above(params: &ModelParams, method: &'static str) -> Result<f64> {
    let r0 = params.r0();
    if r0 <= 1.0 {
        return Err(Error::NotApplicable { method, reason: format!("needs R0 > 1, got {r0}") });
    }
    Ok(r0)
}

fn require_classic(params: &ModelParams, method: &'static str) -> Result<()> {
    if params.k_stages != 1 {
        return Err(Error::NotApplicable { method, reason: "defined for k = 1 only".into() });
    }
    Ok(())
}

/// Solution of the deterministic SIS equation at time `t` from fraction `y0`.
pub fn det_solution(params: &ModelParams, y0: f64, t: f64) -> Result<f64> {
    let (b, g) = (params.beta, params.gamma);
    if b == g {
        return Err(Error::NotApplicable {
            method: "deterministic solution",
            reason: "closed form requires beta != gamma".into(),
        });
    }
    if !(0.0..=1.0).contains(&y0) || !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("need 0 <= y0 <= 1 and t >= 0, got y0 = {y0}, t = {t}")));
    }
    let e = ((b - g) * t).exp();
    if e.is_infinite() {
        // R0 > 1, t -> inf
        return Ok(if y0 > 0.0 { 1.0 - g / b } else { 0.0 });
    }
    Ok((g - b) * y0 * e / (g - b + b * (1.0 - e) * y0))
}

/// Deterministic time for `N y(t)` to fall from `y` to 0.5.
pub fn tau_det(params: &ModelParams, y: f64) -> Result<f64> {
    let r0 = require_below(params, "Det")?;
    let n = params.n();
    if !(0.5..=n).contains(&y) {
        return Err(Error::OutOfDomain { method: "Det", reason: format!("y = {y} outside [0.5, {n}]") });
    }
    let num = 1.0 - r0 * (1.0 - 0.5 / n);
    let den = 1.0 - r0 * (1.0 - y / n);
    Ok(((2.0 * y).ln() + (num / den).ln()) / (params.gamma * (1.0 - r0)))
}

/// Mean extinction time of the linear birth–death chain with rates
/// `beta`, `gamma` from `i` individuals.
///
/// The printed form contains `R0^{-i}` terms that cancel catastrophically; it
/// is rearranged to `(H_{i-1} + ln(1 - R0) + sum_{j>=0} R0^j/(i+j)) / (1 - R0)`.
pub fn tau_lin(params: &ModelParams, i: u32) -> Result<f64> {
    let r0 = require_below(params, "Lin")?;
    if i == 0 {
        return Err(Error::InvalidArgument("Lin needs i >= 1".into()));
    }
    let harmonic: f64 = (1..i).map(|m| 1.0 / m as f64).sum();
    let mut tail = 0.0;
    let mut pow = 1.0;
    let mut j = 0u64;
    loop {
        let term = pow / (i as f64 + j as f64);
        tail += term;
        if term < 1e-18 * tail || pow == 0.0 {
            break;
        }
        pow *= r0;
        j += 1;
    }
    Ok((harmonic + (1.0 - r0).ln() + tail) / (params.gamma * (1.0 - r0)))
}

/// Large-N estimate for a fixed initial fraction, `ln y / (gamma (1 - R0))`.
pub fn tau_dss(params: &ModelParams, y: f64) -> Result<f64> {
    let r0 = require_below(params, "DSS")?;
    if !(y >= 1.0) {
        return Err(Error::OutOfDomain { method: "DSS", reason: format!("needs y >= 1, got {y}") });
    }
    Ok(y.ln() / (params.gamma * (1.0 - r0)))
}

/// Alternative large-N estimate for a fixed initial fraction; negative for
/// very small `y`.
pub fn tau_kl(params: &ModelParams, y: f64) -> Result<f64> {
    let r0 = require_below(params, "KL")?;
    let d = 1.0 - r0 * (1.0 - y / params.n());
    if !(d > 0.0) || !(y > 0.0) {
        return Err(Error::OutOfDomain { method: "KL", reason: format!("log argument not positive at y = {y}") });
    }
    Ok((y.ln() + d.ln() + EULER_GAMMA) / (params.gamma * d))
}

/// The action `A = 1/R0 - 1 + ln R0` (zero at `R0 = 1`).
pub fn action_closed_form(r0: f64) -> Result<f64> {
    if !(r0 >= 1.0) {
        return Err(Error::NotApplicable { method: "action", reason: format!("needs R0 >= 1, got {r0}") });
    }
    Ok(1.0 / r0 - 1.0 + r0.ln())
}

/// `tau_H = exp(N A)`, stored in log form.
pub fn tau_h(params: &ModelParams) -> Result<ExtinctionEstimate> {
    let r0 = require_above(params, "Hamiltonian")?;
    Ok(ExtinctionEstimate::from_ln(Method::HamiltonianAction, params.n() * action_closed_form(r0)?, params))
}

/// Asymptotic mean time from quasi-stationarity for the classic model.
pub fn tau_ad(params: &ModelParams) -> Result<ExtinctionEstimate> {
    let r0 = require_above(params, "AD")?;
    let n = params.n();
    let ln = -params.gamma.ln() + 0.5 * (2.0 * PI / n).ln() + r0.ln() - 2.0 * (r0 - 1.0).ln()
        + n * action_closed_form(r0)?;
    Ok(ExtinctionEstimate::from_ln(Method::Ad, ln, params))
}

/// Exponential rate `(R0 - 1)^2 / (2 R0)` of the Ornstein–Uhlenbeck estimate.
pub fn ou_exponent(r0: f64) -> f64 {
    (r0 - 1.0).powi(2) / (2.0 * r0)
}

/// Ornstein–Uhlenbeck estimate of the mean time from quasi-stationarity. The
/// same formula is used for every `k`.
pub fn tau_ou(params: &ModelParams) -> Result<ExtinctionEstimate> {
    let r0 = require_above(params, "OU")?;
    let n = params.n();
    let ln = -params.gamma.ln() + 0.5 * (2.0 * PI * n / r0).ln() + n * ou_exponent(r0);
    Ok(ExtinctionEstimate::from_ln(Method::Ou, ln, params))
}

/// Population size above which the Gaussian approximation has coefficient of
/// variation at most 1/3: `9 R0 / (R0 - 1)^2`.
pub fn ou_min_population(r0: f64) -> Result<f64> {
    if !(r0 > 1.0) {
        return Err(Error::NotApplicable { method: "OU", reason: format!("needs R0 > 1, got {r0}") });
    }
    Ok(9.0 * r0 / (r0 - 1.0).powi(2))
}

/// Whether `N` exceeds [`ou_min_population`].
pub fn ou_validity(params: &ModelParams) -> Result<bool> {
    Ok(params.n() > ou_min_population(params.r0())?)
}

/// Linearized drift matrix about the endemic equilibrium.
pub fn ou_drift_matrix(params: &ModelParams) -> DMatrix<f64> {
    let k = params.k();
    let kg = k as f64 * params.gamma;
    let first = 2.0 * params.gamma - params.beta;
    let mut j = DMatrix::zeros(k, k);
    for c in 0..k {
        j[(0, c)] = first;
    }
    j[(0, 0)] -= kg;
    for r in 1..k {
        j[(r, r - 1)] = kg;
        j[(r, r)] = -kg;
    }
    j
}

/// Local variance matrix at the endemic equilibrium.
pub fn ou_noise_matrix(params: &ModelParams) -> DMatrix<f64> {
    let k = params.k();
    let scale = params.n() * params.gamma * (1.0 - 1.0 / params.r0());
    DMatrix::from_fn(k, k, |r, c| match r.abs_diff(c) {
        0 => 2.0 * scale,
        1 => -scale,
        _ => 0.0,
    })
}

/// Stationary variance `V` of the multivariate OU approximation, solving the
/// Lyapunov equation `J V + V J^T = -B`.
pub fn ou_stationary_variance(params: &ModelParams) -> Result<DMatrix<f64>> {
    require_above(params, "OU variance")?;
    let k = params.k();
    let j = ou_drift_matrix(params);
    let b = ou_noise_matrix(params);
    let eye = DMatrix::<f64>::identity(k, k);
    // column-major vec: vec(J V) = (I (x) J) vec V, vec(V J^T) = (J (x) I) vec V
    let op = eye.kronecker(&j) + j.kronecker(&eye);
    let rhs = -DMatrix::from_column_slice(k * k, 1, b.as_slice());
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or(Error::NumericalFailure { what: "Lyapunov solve", residual: f64::INFINITY })?;
    let v = DMatrix::from_column_slice(k, k, sol.as_slice());
    let v = (&v + v.transpose()) * 0.5;
    let res = (&j * &v + &v * j.transpose() + &b).amax();
    if !(res <= 1e-12 * b.amax().max(1.0)) || v.clone().cholesky().is_none() {
        return Err(Error::NumericalFailure { what: "Lyapunov solve", residual: res });
    }
    Ok(v)
}

/// Closed form `(N/k)(1 - 1/R0) I + (N/k^2)(2/R0 - 1) 1 1^T`.
pub fn ou_variance_closed_form(params: &ModelParams) -> DMatrix<f64> {
    let k = params.k();
    let kf = k as f64;
    let (n, r0) = (params.n(), params.r0());
    let diag = n / kf * (1.0 - 1.0 / r0);
    let all = n / (kf * kf) * (2.0 / r0 - 1.0);
    DMatrix::from_fn(k, k, |r, c| all + if r == c { diag } else { 0.0 })
}

/// Exponential rate `2(R0 - 1)/R0 + (4/R0) ln(2/(R0 + 1))` of the diffusion
/// asymptotic.
pub fn fpe_exponent(r0: f64) -> f64 {
    2.0 * (r0 - 1.0) / r0 + 4.0 / r0 * (2.0 / (r0 + 1.0)).ln()
}

/// Large-N asymptotic of the 1-D diffusion exit time from `y = O(N)`.
pub fn tau_fpe_asymptotic(params: &ModelParams) -> Result<ExtinctionEstimate> {
    require_classic(params, "FPE")?;
    let r0 = require_above(params, "FPE")?;
    let n = params.n();
    let ln = -params.gamma.ln() + 0.5 * (2.0 * PI / n).ln() + (r0 * (r0 + 1.0)).ln()
        - (2.0 * (r0 - 1.0).powi(2) * r0.sqrt()).ln()
        + n * fpe_exponent(r0);
    Ok(ExtinctionEstimate::from_ln(Method::Fpe, ln, params))
}

/// Minor-outbreak probability `p` in `[0, 1)` with
/// `p (1 + R0 (1 - p)/k)^k = 1`, found by bracketed root finding.
pub fn p_minor_outbreak_root(params: &ModelParams) -> Result<f64> {
    let r0 = require_above(params, "BBN")?;
    let k = params.k_stages as f64;
    let f = |p: f64| p * (1.0 + r0 * (1.0 - p) / k).powf(k) - 1.0;
    // p = 1 is always a root and f'(1) = 1 - R0 < 0, so f > 0 just below 1
    let mut hi = 0.5;
    while f(hi) <= 0.0 {
        hi = 1.0 - 0.5 * (1.0 - hi);
        if 1.0 - hi < 1e-14 {
            return Err(Error::NotApplicable { method: "BBN", reason: "root not bracketed below 1".into() });
        }
    }
    let p = bracketed_root(f, 0.0, hi, 1e-16)?;
    let res = f(p).abs();
    if res >= 1e-12 {
        return Err(Error::NumericalFailure { what: "minor outbreak probability", residual: res });
    }
    Ok(p)
}

/// Minor-outbreak probability: `1/R0` for `k = 1`, otherwise
/// [`p_minor_outbreak_root`].
pub fn p_minor_outbreak(params: &ModelParams) -> Result<f64> {
    let r0 = require_above(params, "BBN")?;
    if params.k_stages == 1 {
        return Ok(1.0 / r0);
    }
    p_minor_outbreak_root(params)
}

/// Explicit `k = 2` minor-outbreak probability.
pub fn p_minor_outbreak_k2(r0: f64) -> f64 {
    (4.0 + r0 - (r0 * (8.0 + r0)).sqrt()) / (2.0 * r0)
}

/// Asymptotic mean time from quasi-stationarity for Erlang infectious
/// periods (mean `1/gamma`).
pub fn tau_bbn(params: &ModelParams) -> Result<ExtinctionEstimate> {
    let r0 = require_above(params, "BBN")?;
    let p = p_minor_outbreak(params)?;
    let n = params.n();
    let ln = -params.gamma.ln() + 0.5 * (2.0 * PI / n).ln() - (r0 - 1.0).ln() - (1.0 - p).ln()
        + n * action_closed_form(r0)?;
    Ok(ExtinctionEstimate::from_ln(Method::Bbn, ln, params))
}

/// Momentum coordinates `(k, k-1, .., 1) ln z*` of the non-classical
/// disease-free equilibrium, with `sum_{m=1..k} z*^m = k gamma / beta`.
pub fn theta_star(params: &ModelParams) -> Result<Vec<f64>> {
    if !(params.beta > 0.0) {
        return Err(Error::InvalidArgument("theta* needs beta > 0".into()));
    }
    let k = params.k();
    let target = k as f64 * params.gamma / params.beta;
    let f = |z: f64| (1..=k).map(|m| z.powi(m as i32)).sum::<f64>() - target;
    let z = bracketed_root(f, 0.0, target.max(1.0), 1e-17)?;
    let res = f(z).abs();
    if res >= 1e-14 * target.max(1.0) {
        return Err(Error::NumericalFailure { what: "theta* root", residual: res });
    }
    let ln_z = z.ln();
    Ok((0..k).map(|m| (k - m) as f64 * ln_z).collect())
}

/// The Hamiltonian `H_k(y, theta)` in scaled coordinates.
pub fn hamiltonian(params: &ModelParams, y: &[f64], theta: &[f64]) -> f64 {
    let k = params.k();
    let kg = k as f64 * params.gamma;
    let total: f64 = y.iter().sum();
    let mut h = params.beta * total * (1.0 - total) * theta[0].exp_m1();
    for m in 0..k - 1 {
        h += kg * y[m] * (theta[m + 1] - theta[m]).exp_m1();
    }
    h + kg * y[k - 1] * (-theta[k - 1]).exp_m1()
}

/// Quasi-potential `S_k(theta) = ln(E/k) - (gamma/beta)(1 - k/E)` with
/// `E = sum exp(theta_m)`.
pub fn s_k(params: &ModelParams, theta: &[f64]) -> f64 {
    let k = params.k_stages as f64;
    let e: f64 = theta.iter().map(|t| t.exp()).sum();
    (e / k).ln() - params.gamma / params.beta * (1.0 - k / e)
}

/// Analytic gradient of [`s_k`].
pub fn s_k_gradient(params: &ModelParams, theta: &[f64]) -> Vec<f64> {
    let k = params.k_stages as f64;
    let e: f64 = theta.iter().map(|t| t.exp()).sum();
    let c = 1.0 / e - params.gamma / params.beta * k / (e * e);
    theta.iter().map(|t| t.exp() * c).collect()
}

/// `H_k(grad S_k(theta), theta)`, identically zero.
pub fn hj_residual(params: &ModelParams, theta: &[f64]) -> f64 {
    hamiltonian(params, &s_k_gradient(params, theta), theta)
}

/// A quasi-potential evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct QuasiPotentialEval {
    pub theta: Vec<f64>,
    pub s_value: f64,
}

impl QuasiPotentialEval {
    pub fn new(params: &ModelParams, theta: &[f64]) -> Self {
        Self { theta: theta.to_vec(), s_value: s_k(params, theta) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sis(beta: f64, n: u32) -> ModelParams {
        ModelParams::sis(beta, 1.0, n).unwrap()
    }

    #[test]
    fn deterministic_solution() {
        let p = sis(1.5, 100);
        let ys = p.endemic_fraction().unwrap();
        for t in [0.0, 1.0, 10.0, 1e3] {
            assert!((det_solution(&p, ys, t).unwrap() - ys).abs() < 1e-14);
        }
        let p0 = ModelParams::sis(0.0, 2.0, 10).unwrap();
        assert!((det_solution(&p0, 0.4, 1.5).unwrap() - 0.4 * (-3.0f64).exp()).abs() < 1e-15);
        let p = sis(0.8, 100);
        assert!(det_solution(&p, 0.3, 500.0).unwrap() < 1e-30);
        assert!(det_solution(&sis(1.0, 10), 0.3, 1.0).is_err());
    }

    #[test]
    fn det_values() {
        let p = sis(0.8, 100);
        assert_eq!(tau_det(&p, 0.5).unwrap(), 0.0);
        let v = tau_det(&p, 30.0).unwrap();
        let hand = 5.0 * (60f64.ln() + (0.204f64 / 0.44).ln());
        assert!((v - hand).abs() < 1e-12);
        assert!((v - 16.63).abs() < 5e-3);
        for y in [1.0, 5.0, 30.0, 90.0] {
            let h = 1e-5;
            let fd = (tau_det(&p, y + h).unwrap() - tau_det(&p, y - h).unwrap()) / (2.0 * h);
            let exact = 1.0 / (y * (1.0 - 0.8 * (1.0 - y / 100.0)));
            assert!((fd - exact).abs() < 1e-6, "{fd} {exact}");
        }
        assert!(tau_det(&sis(1.2, 100), 3.0).is_err());
        assert!(tau_det(&p, 0.4).is_err());
    }

    #[test]
    fn lin_values() {
        let p = sis(0.8, 100);
        let v = tau_lin(&p, 1).unwrap();
        assert!((v + (0.2f64).ln() / 0.8).abs() < 1e-13);
        assert!((v - 2.0118).abs() < 1e-4);
        let p0 = ModelParams::sis(0.0, 1.0, 10).unwrap();
        assert!((tau_lin(&p0, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!((tau_lin(&p0, 3).unwrap() - 11.0 / 6.0).abs() < 1e-14);
        // printed form where it is still well conditioned
        let r: f64 = 0.8;
        for i in 1..=6 {
            let printed = ((1.0 - r.powi(-i)) * (1.0 - r).ln()
                + (1..i).map(|m| (1.0 - r.powi(m - i)) / m as f64).sum::<f64>())
                / (1.0 - r);
            assert!((tau_lin(&p, i as u32).unwrap() - printed).abs() < 1e-11);
        }
        assert_eq!(tau_lin(&p, 3).unwrap(), tau_lin(&sis(0.8, 7), 3).unwrap());
        assert!(tau_lin(&sis(1.0, 10), 1).is_err());
    }

    #[test]
    fn dss_kl_values() {
        let p = sis(0.8, 100);
        assert!((tau_dss(&p, 30.0).unwrap() - 5.0 * 30f64.ln()).abs() < 1e-12);
        assert!((tau_dss(&p, 30.0).unwrap() - 17.006).abs() < 1e-3);
        let kl = tau_kl(&p, 30.0).unwrap();
        assert!((kl - 7.176).abs() < 1e-3);
        assert!(tau_kl(&p, 1.0).unwrap() < 0.0 && tau_kl(&p, 2.0).unwrap() < 0.0);
        assert!((EULER_GAMMA - 0.577216).abs() < 1e-6);
        assert!(tau_kl(&ModelParams::sis(0.9, 1.0, 100).unwrap(), -50.0).is_err());
    }

    #[test]
    fn ad_ou_values() {
        let p = sis(1.5, 100);
        let ad = tau_ad(&p).unwrap();
        let a = 1.0 / 1.5 - 1.0 + 1.5f64.ln();
        let direct = (2.0 * PI / 100.0).sqrt() * 1.5 / 0.25 * (100.0 * a).exp();
        assert!((ad.value() - direct).abs() < 1e-10 * direct);
        assert!((ad.value() - 2.04e3).abs() < 10.0);
        let ou = tau_ou(&p).unwrap();
        assert!((ou.value() / 8.51e4 - 1.0).abs() < 1e-3);
        assert!(tau_ad(&sis(1.0, 100)).is_err());
        assert!(tau_ou(&sis(0.9, 100)).is_err());
        assert!(ou_validity(&p).unwrap());
        assert!(!ou_validity(&sis(1.5, 50)).unwrap());
        assert!((ou_min_population(1.5).unwrap() - 54.0).abs() < 1e-12);
        for r0 in [1.1, 1.5, 2.0] {
            assert!(ou_exponent(r0) > action_closed_form(r0).unwrap());
        }
        // log form survives where the linear value overflows
        let big = tau_ou(&sis(1.5, 20_000)).unwrap();
        assert!(big.value().is_infinite() && big.ln_value.is_finite());
    }

    #[test]
    fn ad_log_rate_tends_to_action() {
        let a = action_closed_form(1.5).unwrap();
        let gaps: Vec<f64> = [1e2, 1e4, 1e6]
            .iter()
            .map(|&n| (tau_ad(&sis(1.5, n as u32)).unwrap().ln_value / n - a).abs())
            .collect();
        assert!(gaps[2] < gaps[1] && gaps[1] < gaps[0] && gaps[2] < 1e-4);
    }

    #[test]
    fn lyapunov_matches_closed_form() {
        for k in 1..=5 {
            for n in [50, 100] {
                for b in [1.1, 1.5] {
                    let p = ModelParams::new(b, 1.0, n, k).unwrap();
                    let v = ou_stationary_variance(&p).unwrap();
                    let c = ou_variance_closed_form(&p);
                    for (x, y) in v.iter().zip(c.iter()) {
                        assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0), "k={k} {x} {y}");
                    }
                    assert!((v.sum() - n as f64 / b).abs() < 1e-10 * n as f64);
                }
            }
        }
        let v = ou_stationary_variance(&ModelParams::new(1.5, 1.0, 100, 2).unwrap()).unwrap();
        assert!((v[(0, 0)] - 25.0).abs() < 1e-10 && (v[(0, 1)] - 25.0 / 3.0).abs() < 1e-10);
        let v1 = ou_stationary_variance(&sis(1.5, 100)).unwrap();
        assert!((v1[(0, 0)] - 100.0 / 1.5).abs() < 1e-10);
    }

    #[test]
    fn fpe_exponent_facts() {
        assert!((fpe_exponent(1.5) - 0.07162).abs() < 1e-5);
        assert_eq!(fpe_exponent(1.0), 0.0);
        for j in 1..=100 {
            let r0 = 1.0 + 2.0 * j as f64 / 100.0;
            assert!(fpe_exponent(r0) < action_closed_form(r0).unwrap());
        }
        assert!(tau_fpe_asymptotic(&ModelParams::new(1.5, 1.0, 100, 2).unwrap()).is_err());
        assert!(tau_fpe_asymptotic(&sis(1.5, 100)).unwrap().value() > 0.0);
    }

    #[test]
    fn bbn_values() {
        for r0 in [1.1, 1.5, 2.0, 3.0] {
            let p = sis(r0, 100);
            assert_eq!(p_minor_outbreak(&p).unwrap(), 1.0 / r0);
            assert!((p_minor_outbreak_root(&p).unwrap() - 1.0 / r0).abs() < 1e-13);
            let bbn = tau_bbn(&p).unwrap();
            let ad = tau_ad(&p).unwrap();
            assert!((bbn.ln_value - ad.ln_value).abs() < 1e-12);
        }
        let p2 = ModelParams::new(1.5, 1.0, 100, 2).unwrap();
        let pq = p_minor_outbreak(&p2).unwrap();
        assert!((pq - p_minor_outbreak_k2(1.5)).abs() < 1e-14);
        assert!((pq - 0.575028).abs() < 1e-6);
        let near = ModelParams::new(1.0001, 1.0, 100, 2).unwrap();
        assert!(p_minor_outbreak(&near).unwrap() > 0.999);
        // the k = 2 closed form of the estimate
        let r0: f64 = 1.5;
        let direct = (2.0 * PI / 100.0).sqrt() * 2.0 * r0
            * (100.0 * action_closed_form(r0).unwrap()).exp()
            / ((r0 - 1.0) * (r0 - 4.0 + (r0 * (8.0 + r0)).sqrt()));
        assert!((tau_bbn(&p2).unwrap().value() / direct - 1.0).abs() < 1e-12);
        assert!(p_minor_outbreak(&ModelParams::new(0.9, 1.0, 10, 2).unwrap()).is_err());
    }

    #[test]
    fn action_values() {
        assert_eq!(action_closed_form(1.0).unwrap(), 0.0);
        assert!((action_closed_form(1.5).unwrap() - 0.072133).abs() < 1e-5);
        assert!((action_closed_form(2.0).unwrap() - 0.193147).abs() < 1e-6);
        let th = tau_h(&sis(2.0, 50)).unwrap();
        assert!((th.ln_value - 50.0 * action_closed_form(2.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn theta_star_values() {
        let t = theta_star(&sis(1.5, 10)).unwrap();
        assert!((t[0] + 1.5f64.ln()).abs() < 1e-14);
        let p2 = ModelParams::new(1.5, 1.0, 10, 2).unwrap();
        let t = theta_star(&p2).unwrap();
        let z = (-1.0 + (1.0f64 + 16.0 / 3.0).sqrt()) / 2.0;
        assert!((t[1] - z.ln()).abs() < 1e-14 && (t[0] - 2.0 * z.ln()).abs() < 1e-14);
        assert!((t[1] + 0.27667).abs() < 1e-5);
        let t = theta_star(&ModelParams::new(1.0, 1.0, 10, 4).unwrap()).unwrap();
        assert!(t.iter().all(|v| v.abs() < 1e-14));
        for k in 1..=5 {
            let t = theta_star(&ModelParams::new(2.0, 1.0, 10, k).unwrap()).unwrap();
            assert!(t.iter().all(|&v| v < 0.0));
        }
    }

    #[test]
    fn quasi_potential() {
        let p2 = ModelParams::new(1.5, 1.0, 10, 2).unwrap();
        assert_eq!(s_k(&p2, &[0.0, 0.0]), 0.0);
        let ts = theta_star(&p2).unwrap();
        assert!((s_k(&p2, &ts) + 0.072133).abs() < 1e-5);
        for k in 1..=5 {
            for r0 in [1.2, 1.5, 2.0] {
                let p = ModelParams::new(r0, 1.0, 10, k).unwrap();
                let ts = theta_star(&p).unwrap();
                let a = action_closed_form(r0).unwrap();
                assert!((s_k(&p, &ts) + a).abs() < 1e-12);
            }
        }
        let ev = QuasiPotentialEval::new(&p2, &ts);
        assert_eq!(ev.s_value, s_k(&p2, &ts));
    }

    #[test]
    fn hamiltonian_vanishes_on_classical_points() {
        let p = ModelParams::new(1.5, 1.0, 10, 3).unwrap();
        let ys = p.endemic_state().unwrap();
        assert!(hamiltonian(&p, &ys, &[0.0; 3]).abs() < 1e-15);
        let ts = theta_star(&p).unwrap();
        assert_eq!(hamiltonian(&p, &[0.0; 3], &ts), 0.0);
    }

    proptest! {
        #[test]
        fn hj_residual_vanishes(k in 1u32..=5, r0 in 0.3f64..4.0, raw in prop::collection::vec(-1.0f64..1.0, 5)) {
            let p = ModelParams::new(r0, 1.0, 10, k).unwrap();
            let theta = &raw[..k as usize];
            prop_assert!(hj_residual(&p, theta).abs() < 1e-12);
        }

        #[test]
        fn times_scale_inversely_with_rates(c in prop::sample::select(vec![0.5, 2.0]), y in 1.0f64..90.0) {
            let p = sis(0.8, 100);
            let q = ModelParams::sis(0.8 * c, c, 100).unwrap();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
            prop_assert!(close(tau_det(&q, y).unwrap(), tau_det(&p, y).unwrap() / c));
            prop_assert!(close(tau_lin(&q, y as u32).unwrap(), tau_lin(&p, y as u32).unwrap() / c));
            prop_assert!(close(tau_dss(&q, y).unwrap(), tau_dss(&p, y).unwrap() / c));
            prop_assert!(close(tau_kl(&q, y).unwrap(), tau_kl(&p, y).unwrap() / c));
            let p = sis(1.5, 100);
            let q = ModelParams::sis(1.5 * c, c, 100).unwrap();
            for (a, b) in [
                (tau_ad(&q).unwrap(), tau_ad(&p).unwrap()),
                (tau_ou(&q).unwrap(), tau_ou(&p).unwrap()),
                (tau_bbn(&q).unwrap(), tau_bbn(&p).unwrap()),
                (tau_fpe_asymptotic(&q).unwrap(), tau_fpe_asymptotic(&p).unwrap()),
            ] {
                prop_assert!(close(a.value(), b.value() / c));
            }
        }

        #[test]
        fn det_and_dss_increase(y in 1.0f64..98.0) {
            let p = sis(0.8, 100);
            prop_assert!(tau_det(&p, y + 1.0).unwrap() > tau_det(&p, y).unwrap());
            prop_assert!(tau_dss(&p, y + 1.0).unwrap() > tau_dss(&p, y).unwrap());
        }
    }
}
