//! Mean exit time of the one-dimensional diffusion approximation.
//!
//! The diffusion `dY = (beta/N Y (N-Y) - gamma Y) dt + sqrt(beta/N Y (N-Y) + gamma Y) dW`
//! is absorbed at a small level (0.5 counts by default) and reflected at `N`.
//! Its mean exit time has an explicit double-integral form, evaluated here by
//! nested adaptive quadrature, and is independently available from a
//! finite-difference solve of the backward ODE.

use crate::error::{Error, Result};
use crate::linalg::solve_tridiagonal;
use crate::model::ModelParams;
use crate::par::{map_range, Execution};
use crate::quad::integrate;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureConfig {
    pub outer_panels: usize,
    pub inner_panels: usize,
    /// Combine the power and exponential factors into one exponent.
    pub log_space: bool,
    /// Absorbing level in counts.
    pub level: f64,
    pub rel_tol: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { outer_panels: 64, inner_panels: 64, log_space: true, level: 0.5, rel_tol: 1e-10 }
    }
}

impl QuadratureConfig {
    fn validate(&self, n: f64) -> Result<()> {
        if self.outer_panels < 64 || self.inner_panels < 64 {
            return Err(Error::InvalidArgument("quadrature needs at least 64 panels".into()));
        }
        if !(self.level >= 0.0 && self.level < n) {
            return Err(Error::InvalidArgument(format!("absorbing level {} outside [0, N)", self.level)));
        }
        Ok(())
    }
}

fn require_diffusion_params(params: &ModelParams) -> Result<()> {
    if params.k_stages != 1 {
        return Err(Error::NotApplicable { method: "Diff", reason: "1-D diffusion needs k = 1".into() });
    }
    if !(params.beta > 0.0) {
        return Err(Error::NotApplicable { method: "Diff", reason: "needs beta > 0".into() });
    }
    Ok(())
}

/// `g(u) = int_u^1 exp(phi(z) - phi(u)) / (z (1 + R0 (1 - z))) dz` with
/// `phi(z) = (4N/R0) ln(1 + R0(1-z)) + 2 N z`.
struct Inner {
    n: f64,
    r0: f64,
    cfg: QuadratureConfig,
}

impl Inner {
    fn phi(&self, z: f64) -> f64 {
        4.0 * self.n / self.r0 * (self.r0 * (1.0 - z)).ln_1p() + 2.0 * self.n * z
    }

    fn eval(&self, u: f64) -> f64 {
        let (n, r0) = (self.n, self.r0);
        let phi_u = self.phi(u);
        let integrand = |z: f64| {
            let d = 1.0 + r0 * (1.0 - z);
            let weight = if self.cfg.log_space {
                (self.phi(z) - phi_u).exp()
            } else {
                (d / (1.0 + r0 * (1.0 - u))).powf(4.0 * n / r0) * (2.0 * n * (z - u)).exp()
            };
            weight / (z * d)
        };
        // the integrand peaks at the endemic level; keep it on a panel edge
        let ystar = 1.0 - 1.0 / r0;
        if ystar > u && ystar < 1.0 {
            let share = ((ystar - u) / (1.0 - u) * self.cfg.inner_panels as f64).round() as usize;
            let left = share.clamp(1, self.cfg.inner_panels - 1);
            integrate(integrand, u, ystar, left, 0.0, self.cfg.rel_tol).value
                + integrate(integrand, ystar, 1.0, self.cfg.inner_panels - left, 0.0, self.cfg.rel_tol).value
        } else {
            integrate(integrand, u, 1.0, self.cfg.inner_panels, 0.0, self.cfg.rel_tol).value
        }
    }
}

/// Mean exit time from `y` counts by the double-integral formula.
pub fn tau_diff_integral(params: &ModelParams, y: f64) -> Result<f64> {
    tau_diff_integral_with(params, y, &QuadratureConfig::default())
}

pub fn tau_diff_integral_with(params: &ModelParams, y: f64, cfg: &QuadratureConfig) -> Result<f64> {
    Ok(tau_diff_integral_batch(params, &[y], cfg, Execution::Sequential)?[0])
}

/// Mean exit times for several starting counts. The outer integral is
/// accumulated over the sorted starting points, with panels evaluated under
/// `exec`.
pub fn tau_diff_integral_batch(
    params: &ModelParams,
    ys: &[f64],
    cfg: &QuadratureConfig,
    exec: Execution,
) -> Result<Vec<f64>> {
    require_diffusion_params(params)?;
    let n = params.n();
    cfg.validate(n)?;
    for &y in ys {
        if !(y >= cfg.level && y <= n) {
            return Err(Error::OutOfDomain { method: "Diff", reason: format!("y = {y} outside [{}, {n}]", cfg.level) });
        }
    }
    let inner = Inner { n, r0: params.r0(), cfg: *cfg };
    let mut order: Vec<usize> = (0..ys.len()).collect();
    order.sort_by(|&a, &b| ys[a].total_cmp(&ys[b]));
    // breakpoints in fraction units, from the absorbing level upwards
    let mut knots = vec![cfg.level / n];
    knots.extend(order.iter().map(|&i| ys[i] / n));
    let lo = knots[0];
    let hi = *knots.last().unwrap_or(&lo);
    let span = hi - lo;
    // each segment gets panels in proportion to its length, at least one
    let segments = knots.len() - 1;
    let pieces = map_range(exec, segments, |s| {
        let (a, b) = (knots[s], knots[s + 1]);
        if b <= a {
            return 0.0;
        }
        let panels = ((b - a) / span * cfg.outer_panels as f64).ceil().max(1.0) as usize;
        integrate(|u| inner.eval(u), a, b, panels, 0.0, cfg.rel_tol).value
    });
    let scale = 2.0 * n / params.gamma;
    let mut out = vec![0.0; ys.len()];
    let mut acc = 0.0;
    for (s, &i) in order.iter().enumerate() {
        acc += pieces[s];
        out[i] = scale * acc;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Overflow("diffusion exit-time integral"));
    }
    Ok(out)
}

/// Finite-difference solution of the backward ODE on a uniform grid.
#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub x: Vec<f64>,
    pub tau: Vec<f64>,
}

impl OdeSolution {
    /// Linear interpolation of the nodal values.
    pub fn at(&self, y: f64) -> f64 {
        let (a, b) = (self.x[0], *self.x.last().unwrap());
        let m = self.x.len() - 1;
        let s = ((y - a) / (b - a) * m as f64).clamp(0.0, m as f64);
        let i = (s.floor() as usize).min(m - 1);
        let w = s - i as f64;
        self.tau[i] * (1.0 - w) + self.tau[i + 1] * w
    }
}

/// Solves `A tau' + B tau''/2 = -1` on `[level, N]` with `tau(level) = 0` and
/// `tau'(N) = 0` by second-order central differences on `nodes` points.
pub fn solve_diffusion_ode(params: &ModelParams, nodes: usize, level: f64) -> Result<OdeSolution> {
    require_diffusion_params(params)?;
    let n = params.n();
    if nodes < 3 || !(level >= 0.0 && level < n) {
        return Err(Error::InvalidArgument("ODE grid needs >= 3 nodes and 0 <= level < N".into()));
    }
    let (beta, gamma) = (params.beta, params.gamma);
    let m = nodes - 1;
    let h = (n - level) / m as f64;
    let x: Vec<f64> = (0..=m).map(|i| if i == m { n } else { level + h * i as f64 }).collect();
    // unknowns tau_1..tau_m
    let mut lower = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let rhs = vec![-1.0; m];
    for r in 0..m {
        let xi = x[r + 1];
        let a = beta / n * xi * (n - xi) - gamma * xi;
        let b = beta / n * xi * (n - xi) + gamma * xi;
        if r + 1 == m {
            // ghost node tau_{m+1} = tau_{m-1}
            lower[r] = b / (h * h);
            diag[r] = -b / (h * h);
        } else {
            lower[r] = b / (2.0 * h * h) - a / (2.0 * h);
            diag[r] = -b / (h * h);
            upper[r] = b / (2.0 * h * h) + a / (2.0 * h);
        }
    }
    let sol = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
    let mut tau = Vec::with_capacity(m + 1);
    tau.push(0.0);
    tau.extend(sol);
    if tau.iter().any(|v| !v.is_finite()) {
        return Err(Error::Overflow("diffusion ODE solve"));
    }
    Ok(OdeSolution { x, tau })
}

/// Default grid size of [`tau_diff_ode`].
pub const ODE_NODES: usize = 4000;

/// Mean exit time from `y` by the finite-difference ODE, checked against a
/// solve on the grid with half the spacing.
pub fn tau_diff_ode(params: &ModelParams, y: f64) -> Result<f64> {
    tau_diff_ode_with(params, y, ODE_NODES, 0.5)
}

pub fn tau_diff_ode_with(params: &ModelParams, y: f64, nodes: usize, level: f64) -> Result<f64> {
    if !(y >= level && y <= params.n()) {
        return Err(Error::OutOfDomain { method: "Diff ODE", reason: format!("y = {y} outside [{level}, N]") });
    }
    let coarse = solve_diffusion_ode(params, nodes, level)?.at(y);
    let fine = solve_diffusion_ode(params, 2 * nodes - 1, level)?.at(y);
    let estimate = (coarse - fine).abs() / fine.abs().max(f64::MIN_POSITIVE);
    if estimate > 0.01 {
        return Err(Error::InsufficientResolution { what: "diffusion ODE grid", estimate });
    }
    Ok(fine)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sis(beta: f64, n: u32) -> ModelParams {
        ModelParams::sis(beta, 1.0, n).unwrap()
    }

    #[test]
    fn zero_at_absorbing_level() {
        let p = sis(0.8, 100);
        assert_eq!(tau_diff_integral(&p, 0.5).unwrap(), 0.0);
        assert_eq!(solve_diffusion_ode(&p, 100, 0.5).unwrap().at(0.5), 0.0);
    }

    #[test]
    fn integral_matches_ode_below_threshold() {
        let p = sis(0.8, 100);
        let ys: Vec<f64> = (1..=100).map(f64::from).collect();
        let quad = tau_diff_integral_batch(&p, &ys, &QuadratureConfig::default(), Execution::Parallel).unwrap();
        let ode = solve_diffusion_ode(&p, ODE_NODES, 0.5).unwrap();
        for (y, q) in ys.iter().zip(&quad) {
            let o = ode.at(*y);
            assert!((q - o).abs() < 0.02 * o, "y={y} quad={q} ode={o}");
        }
        assert!(quad.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn batch_matches_single_calls() {
        let p = sis(1.5, 100);
        let ys = [33.0, 5.0, 80.0];
        let batch = tau_diff_integral_batch(&p, &ys, &QuadratureConfig::default(), Execution::Sequential).unwrap();
        for (y, b) in ys.iter().zip(&batch) {
            let single = tau_diff_integral(&p, *y).unwrap();
            assert!((single - b).abs() < 1e-8 * b);
        }
    }

    #[test]
    fn log_space_agrees_where_raw_form_is_safe() {
        let p = sis(1.5, 60);
        let raw = QuadratureConfig { log_space: false, ..Default::default() };
        let a = tau_diff_integral(&p, 20.0).unwrap();
        let b = tau_diff_integral_with(&p, 20.0, &raw).unwrap();
        assert!((a - b).abs() < 1e-9 * a);
    }

    #[test]
    fn large_population_does_not_overflow() {
        let p = sis(2.0, 2000);
        let v = tau_diff_integral(&p, 1000.0).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn ode_grid_refinement() {
        let p = sis(1.1, 100);
        let y = (100.0 * p.endemic_fraction().unwrap()).floor();
        let a = solve_diffusion_ode(&p, ODE_NODES, 0.5).unwrap().at(y);
        let b = solve_diffusion_ode(&p, 2 * ODE_NODES - 1, 0.5).unwrap().at(y);
        assert!((a - b).abs() < 0.005 * b);
        assert!(tau_diff_ode(&p, y).is_ok());
    }

    #[test]
    fn absorbing_level_shift_agrees_between_solvers() {
        let p = sis(1.5, 100);
        let y = (100.0 * p.endemic_fraction().unwrap()).floor();
        for level in [0.5, 0.1, 0.0] {
            let cfg = QuadratureConfig { level, ..Default::default() };
            let q = tau_diff_integral_with(&p, y, &cfg).unwrap();
            let o = solve_diffusion_ode(&p, 2 * ODE_NODES - 1, level).unwrap().at(y);
            assert!((q - o).abs() < 1e-4 * o, "level={level} quad={q} ode={o}");
        }
    }

    // Both solvers put the shift from 0.5 to 0 at about 20%: near zero the
    // exit time grows roughly linearly in y with slope ~ ln(R0) tau.
    #[test]
    #[ignore = "unattainable: moving the absorbing level to 0 shifts tau by ~20%"]
    fn absorbing_level_is_immaterial() {
        let p = sis(1.5, 100);
        let y = (100.0 * p.endemic_fraction().unwrap()).floor();
        let a = tau_diff_integral(&p, y).unwrap();
        let zero = QuadratureConfig { level: 0.0, ..Default::default() };
        let b = tau_diff_integral_with(&p, y, &zero).unwrap();
        assert!((a - b).abs() < 0.01 * a, "{a} {b}");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(tau_diff_integral(&ModelParams::new(1.5, 1.0, 10, 2).unwrap(), 3.0).is_err());
        assert!(tau_diff_integral(&sis(1.5, 10), 0.2).is_err());
        assert!(tau_diff_integral(&sis(1.5, 10), 11.0).is_err());
        let few = QuadratureConfig { outer_panels: 8, ..Default::default() };
        assert!(tau_diff_integral_with(&sis(1.5, 10), 3.0, &few).is_err());
    }
}
