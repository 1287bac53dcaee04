//! Extinction path of the large-deviations Hamiltonian and its action.
//!
//! The optimal path to extinction leaves the endemic point `(y*, 0)` along
//! its unstable manifold and arrives at the fluctuational extinction point
//! `(0, theta*)`. Near `(y*, 0)` the Hamiltonian vector field is block
//! triangular, `[[D, B], [0, -D^T]]`, with `D` the linearized drift and `B`
//! the local variance (both in fraction units); its unstable subspace is the
//! graph `y - y* = V theta` of the solution of `D V + V D^T + B = 0`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::approx::{ou_drift_matrix, ou_stationary_variance, theta_star};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::par::{map_range, Execution};
use crate::quad::integrate;

/// Right-hand sides `(dy/dt, dtheta/dt) = (dH/dtheta, -dH/dy)`, with the
/// conventions `theta_{k+1} = 0` and `y_0 = 0`.
pub fn equations_of_motion(params: &ModelParams, y: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = params.k();
    let kg = k as f64 * params.gamma;
    let total: f64 = y.iter().sum();
    let th = |m: usize| if m < k { theta[m] } else { 0.0 };
    let mut dy = vec![0.0; k];
    let mut dth = vec![0.0; k];
    let infection = params.beta * (1.0 - 2.0 * total) * theta[0].exp_m1();
    for i in 0..k {
        dy[i] = -kg * y[i] * (th(i + 1) - th(i)).exp();
        if i == 0 {
            dy[i] += params.beta * total * (1.0 - total) * theta[0].exp();
        } else {
            dy[i] += kg * y[i - 1] * (th(i) - th(i - 1)).exp();
        }
        dth[i] = -(infection + kg * (th(i + 1) - th(i)).exp_m1());
    }
    (dy, dth)
}

fn field(params: &ModelParams, z: &[f64]) -> Vec<f64> {
    let k = params.k();
    let (dy, dth) = equations_of_motion(params, &z[..k], &z[k..]);
    dy.into_iter().chain(dth).collect()
}

/// A stored solution of the equations of motion.
#[derive(Debug, Clone)]
pub struct PhaseTrajectory {
    pub params: ModelParams,
    pub times: Vec<f64>,
    /// Fractions per stage.
    pub y: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
    /// Distance in `(y, theta)` from the last stored point to `(0, theta*)`.
    pub terminal_distance: f64,
    pub launch_offset: f64,
    /// Distinct connections found from the initial guesses tried. More than
    /// one would mean the extinction path is not unique.
    pub distinct_connections: usize,
}

impl PhaseTrajectory {
    pub fn max_abs_energy(&self) -> f64 {
        self.energy.iter().fold(0.0, |m, h| m.max(h.abs()))
    }

    /// CSV with header `t,y1..yk,theta1..thetak,H`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let k = self.params.k();
        let mut header = vec!["t".to_string()];
        header.extend((1..=k).map(|m| format!("y{m}")));
        header.extend((1..=k).map(|m| format!("theta{m}")));
        header.push("H".into());
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.times.len() {
            let mut row = vec![format!("{:.11e}", self.times[i])];
            row.extend(self.y[i].iter().chain(&self.theta[i]).map(|v| format!("{v:.11e}")));
            row.push(format!("{:.11e}", self.energy[i]));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShootingConfig {
    /// Launch distance from `(y*, 0)`.
    pub delta: f64,
    /// Acceptance distance to `(0, theta*)`.
    pub eta: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Multiple-shooting segments (k >= 2).
    pub segments: usize,
    /// Fixed RK4 steps per segment (k >= 2).
    pub segment_steps: usize,
    /// Initial guesses tried for k >= 2; every distinct limit is counted.
    pub starts: usize,
    pub exec: Execution,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        Self {
            delta: 1e-6,
            eta: 1e-6,
            rtol: 1e-10,
            atol: 1e-10,
            segments: 80,
            segment_steps: 60,
            starts: 3,
            exec: Execution::Parallel,
        }
    }
}

/// Unstable tangent `V` (fraction units) at the endemic point.
fn unstable_graph(params: &ModelParams) -> Result<DMatrix<f64>> {
    Ok(ou_stationary_variance(params)? / params.n())
}

/// Launch point for the unit momentum direction `dir`.
fn launch(params: &ModelParams, graph: &DMatrix<f64>, dir: &[f64], delta: f64) -> Vec<f64> {
    let k = params.k();
    let ystar = params.endemic_state().unwrap_or_else(|_| vec![0.0; k]);
    let dy: Vec<f64> = (0..k).map(|r| (0..k).map(|c| graph[(r, c)] * dir[c]).sum()).collect();
    let norm = dy.iter().chain(dir).map(|v| v * v).sum::<f64>().sqrt();
    let mut z: Vec<f64> = (0..k).map(|r| ystar[r] + delta * dy[r] / norm).collect();
    z.extend(dir.iter().map(|d| delta * d / norm));
    z
}

// Dormand-Prince 5(4)
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Outcome of one integration towards `(0, theta*)`.
struct Shot {
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    closest: f64,
    closest_time: f64,
    reached: bool,
}

fn distance_to_target(z: &[f64], target: &[f64]) -> f64 {
    z.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn shoot(params: &ModelParams, z0: Vec<f64>, target: &[f64], cfg: &ShootingConfig) -> Shot {
    let rate = params.beta.max(params.gamma) * params.k() as f64;
    let h_max = 0.01 / rate;
    let t_max = 400.0 / (params.beta - params.gamma).abs().min(params.gamma).max(1e-3);
    let escape = 4.0 + 4.0 * target.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut z = z0;
    let mut t = 0.0;
    let mut h = h_max * 0.1;
    let mut times = vec![0.0];
    let mut states = vec![z.clone()];
    let mut closest = distance_to_target(&z, target);
    let mut closest_time = 0.0;
    let mut k = vec![vec![0.0; z.len()]; 7];
    k[0] = field(params, &z);
    while t < t_max {
        let mut stages_z = z.clone();
        for s in 1..7 {
            for i in 0..z.len() {
                stages_z[i] = z[i] + h * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>();
            }
            k[s] = field(params, &stages_z);
        }
        // stage 7 sits at the 5th-order solution (FSAL)
        let new_z = stages_z;
        let err = (0..z.len())
            .map(|i| {
                let e = h * (0..7).map(|j| (B5[j] - B4[j]) * k[j][i]).sum::<f64>();
                let sc = cfg.atol + cfg.rtol * z[i].abs().max(new_z[i].abs());
                (e / sc).powi(2)
            })
            .sum::<f64>()
            .sqrt()
            / (z.len() as f64).sqrt();
        if !err.is_finite() {
            h *= 0.25;
            if h < 1e-14 {
                break;
            }
            continue;
        }
        if err <= 1.0 {
            t += h;
            z = new_z;
            k[0] = k[6].clone();
            let d = distance_to_target(&z, target);
            times.push(t);
            states.push(z.clone());
            if d < closest {
                closest = d;
                closest_time = t;
            }
            if d <= cfg.eta {
                return Shot { times, states, closest, closest_time, reached: true };
            }
            let lost = z.iter().any(|v| !v.is_finite() || v.abs() > escape)
                || z[..params.k()].iter().any(|&y| y < -0.05)
                || (closest < 0.1 && d > 100.0 * closest.max(cfg.eta));
            if lost {
                break;
            }
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h = (h * factor).min(h_max);
    }
    Shot { times, states, closest, closest_time, reached: false }
}

/// Heteroclinic extinction path from `(y*, 0)` to `(0, theta*)`.
pub fn extinction_path(params: &ModelParams) -> Result<PhaseTrajectory> {
    extinction_path_with(params, &ShootingConfig::default())
}

/// For k = 1 the unstable manifold is a single curve and one adaptive shot
/// from `(y*, 0)` reaches the target. For k = 2 the connection leaves along
/// the slow unstable direction and arrives along the slow stable one, so a
/// single shot would need its launch angle resolved far below machine
/// precision; the path is instead found by multiple shooting with
/// projection boundary conditions onto both linearized manifolds.
pub fn extinction_path_with(params: &ModelParams, cfg: &ShootingConfig) -> Result<PhaseTrajectory> {
    if !(params.r0() > 1.0) {
        return Err(Error::NoEndemicEquilibrium { r0: params.r0() });
    }
    let k = params.k();
    if k > 2 {
        return Err(Error::NotApplicable { method: "H", reason: "paths are computed for k <= 2".into() });
    }
    let mut target = vec![0.0; k];
    target.extend(theta_star(params)?);
    if k == 1 {
        let graph = unstable_graph(params)?;
        let shot = shoot(params, launch(params, &graph, &[-1.0], cfg.delta), &target, cfg);
        if !shot.reached {
            return Err(Error::BvpFailure { closest: shot.closest, time: shot.closest_time });
        }
        return Ok(trajectory(params, shot.times, &shot.states, &target, cfg.delta, 1));
    }
    multiple_shooting(params, &target, cfg)
}

fn trajectory(
    params: &ModelParams,
    times: Vec<f64>,
    states: &[Vec<f64>],
    target: &[f64],
    launch_offset: f64,
    distinct_connections: usize,
) -> PhaseTrajectory {
    let k = params.k();
    let terminal_distance = distance_to_target(states.last().unwrap(), target);
    let y: Vec<Vec<f64>> = states.iter().map(|z| z[..k].to_vec()).collect();
    let theta: Vec<Vec<f64>> = states.iter().map(|z| z[k..].to_vec()).collect();
    let energy = y.iter().zip(&theta).map(|(y, t)| crate::approx::hamiltonian(params, y, t)).collect();
    PhaseTrajectory { params: *params, times, y, theta, energy, terminal_distance, launch_offset, distinct_connections }
}

/// `field + eps grad H`. The unfolding parameter `eps` makes the
/// connection problem square; it vanishes on an exact solution.
fn unfolded_field(params: &ModelParams, z: &[f64], eps: f64) -> Vec<f64> {
    let f = field(params, z);
    if eps == 0.0 {
        return f;
    }
    let k = z.len() / 2;
    (0..2 * k).map(|i| f[i] + eps * if i < k { -f[k + i] } else { f[i - k] }).collect()
}

fn rk4(params: &ModelParams, z: &[f64], h: f64, steps: usize, eps: f64, mut sink: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
    let dt = h / steps as f64;
    let axpy = |z: &[f64], a: f64, d: &[f64]| -> Vec<f64> { z.iter().zip(d).map(|(z, d)| z + a * d).collect() };
    let f = |z: &[f64]| unfolded_field(params, z, eps);
    let mut z = z.to_vec();
    for _ in 0..steps {
        let k1 = f(&z);
        let k2 = f(&axpy(&z, 0.5 * dt, &k1));
        let k3 = f(&axpy(&z, 0.5 * dt, &k2));
        let k4 = f(&axpy(&z, dt, &k3));
        for i in 0..z.len() {
            z[i] += dt / 6.0 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
        }
        if let Some(s) = sink.as_deref_mut() {
            s.push(z.clone());
        }
    }
    z
}

/// Jacobian of [`field`].
fn field_jacobian(params: &ModelParams, z: &[f64]) -> DMatrix<f64> {
    let k = params.k();
    let kg = k as f64 * params.gamma;
    let (y, th) = (&z[..k], &z[k..]);
    let total: f64 = y.iter().sum();
    let thx = |m: usize| if m < k { th[m] } else { 0.0 };
    let e0 = th[0].exp();
    let mut jac = DMatrix::zeros(2 * k, 2 * k);
    for i in 0..k {
        // outflow kg y_i exp(theta_{i+1} - theta_i)
        let out = (thx(i + 1) - thx(i)).exp();
        jac[(i, i)] -= kg * out;
        jac[(i, k + i)] += kg * y[i] * out;
        if i + 1 < k {
            jac[(i, k + i + 1)] -= kg * y[i] * out;
        }
        if i == 0 {
            for j in 0..k {
                jac[(0, j)] += params.beta * (1.0 - 2.0 * total) * e0;
            }
            jac[(0, k)] += params.beta * total * (1.0 - total) * e0;
        } else {
            let inflow = (thx(i) - thx(i - 1)).exp();
            jac[(i, i - 1)] += kg * inflow;
            jac[(i, k + i)] += kg * y[i - 1] * inflow;
            jac[(i, k + i - 1)] -= kg * y[i - 1] * inflow;
        }
        for j in 0..k {
            jac[(k + i, j)] = 2.0 * params.beta * th[0].exp_m1();
        }
        jac[(k + i, k)] -= params.beta * (1.0 - 2.0 * total) * e0;
        jac[(k + i, k + i)] += kg * out;
        if i + 1 < k {
            jac[(k + i, k + i + 1)] -= kg * out;
        }
    }
    jac
}

/// RK4 over a segment of length `h` together with the derivatives of the
/// end point in the start state (first `2k` columns), in `h` and in `eps`
/// (last two columns). The segment is run in normalized time with `h` as a
/// parameter, so these are the exact derivatives of the discrete map.
fn rk4_variational(params: &ModelParams, z: &[f64], h: f64, steps: usize, eps: f64) -> (Vec<f64>, DMatrix<f64>) {
    let n = z.len();
    let k = n / 2;
    let ds = 1.0 / steps as f64;
    let mut z = DVector::from_column_slice(z);
    let mut sens = DMatrix::<f64>::identity(n, n + 2);
    let stage = |z: &DVector<f64>, s: &DMatrix<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let f = field(params, z.as_slice());
        let jac = field_jacobian(params, z.as_slice());
        // grad H and its Jacobian, read off the Hamiltonian structure
        let g = DVector::from_fn(n, |i, _| if i < k { -f[k + i] } else { f[i - k] });
        let jg = DMatrix::from_fn(n, n, |i, c| if i < k { -jac[(k + i, c)] } else { jac[(i - k, c)] });
        let rate = DVector::from_vec(f) + &g * eps;
        let mut ds_ = (jac + jg * eps) * s * h;
        for i in 0..n {
            ds_[(i, n)] += rate[i];
            ds_[(i, n + 1)] += g[i] * h;
        }
        (rate * h, ds_)
    };
    for _ in 0..steps {
        let (k1, p1) = stage(&z, &sens);
        let (k2, p2) = stage(&(&z + &k1 * (0.5 * ds)), &(&sens + &p1 * (0.5 * ds)));
        let (k3, p3) = stage(&(&z + &k2 * (0.5 * ds)), &(&sens + &p2 * (0.5 * ds)));
        let (k4, p4) = stage(&(&z + &k3 * ds), &(&sens + &p3 * ds));
        z += (k1 + (k2 + k3) * 2.0 + k4) * (ds / 6.0);
        sens += (p1 + (p2 + p3) * 2.0 + p4) * (ds / 6.0);
    }
    (z.iter().copied().collect(), sens)
}

/// Solves `a X + X a^T = q`.
fn lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = a.nrows();
    let eye = DMatrix::<f64>::identity(k, k);
    let op = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = DMatrix::from_column_slice(k * k, 1, q.as_slice());
    let sol = op.lu().solve(&rhs).ok_or(Error::NumericalFailure { what: "Lyapunov solve", residual: f64::INFINITY })?;
    Ok(DMatrix::from_column_slice(k, k, sol.as_slice()))
}

/// Linearization at `(0, theta*)`: `dy/dt = D y`, `dtheta/dt = C y - D^T (theta - theta*)`.
fn target_linearization(params: &ModelParams, ts: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = params.k();
    let kg = k as f64 * params.gamma;
    let th = |m: usize| if m < k { ts[m] } else { 0.0 };
    let mut d = DMatrix::zeros(k, k);
    for c in 0..k {
        d[(0, c)] = params.beta * ts[0].exp();
    }
    for i in 0..k {
        d[(i, i)] -= kg * (th(i + 1) - th(i)).exp();
        if i > 0 {
            d[(i, i - 1)] += kg * (th(i) - th(i - 1)).exp();
        }
    }
    let c = DMatrix::from_element(k, k, 2.0 * params.beta * ts[0].exp_m1());
    (d, c)
}

/// Slope `v2 / v1` of the eigenvector of a 2x2 matrix with real eigenvalues
/// for the eigenvalue nearer zero.
fn slow_direction(m: &DMatrix<f64>) -> f64 {
    let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let mean = 0.5 * (a + d);
    let disc = (0.25 * (a - d) * (a - d) + b * c).max(0.0).sqrt();
    let lambda = if mean < 0.0 { mean + disc } else { mean - disc };
    // (m - lambda) v = 0 through the better-conditioned row
    if (lambda - a).abs() + b.abs() >= (lambda - d).abs() + c.abs() { (lambda - a) / b } else { c / (lambda - d) }
}

fn slowest_rate(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().fold(f64::INFINITY, |acc, e| acc.min(e.re.abs()))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

const NEWTON_ITERATIONS: usize = 100;
const RESIDUAL_TOL: f64 = 1e-11;
const ACCEPT_TOL: f64 = 1e-9;
const STALL_STEPS: usize = 10;
// continuation starts here when R0 is closer to 1
const SEED_R0: f64 = 1.5;
const CONTINUATION_STEP: f64 = 0.05;
const MIN_CONTINUATION_STEP: f64 = 1e-3;

fn unit(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

/// Two-point problem on `[0, T]` for k = 2. The path starts on the circle
/// `|theta| = delta` of the source manifold `y - y* = V theta` and ends on the
/// circle `|y| = delta_T` of the target manifold `theta - theta* = P y`, each
/// point given by an angle. Unknowns are the start angle, the interior
/// segment start states, the end angle, `T` and the unfolding parameter
/// `eps` of [`unfolded_field`]. Energy conservation makes one matching
/// condition redundant; `eps` takes up the slack, so all conditions are
/// kept and the system is square.
struct Connection {
    params: ModelParams,
    ystar: Vec<f64>,
    theta_star: Vec<f64>,
    v: DMatrix<f64>,
    p: DMatrix<f64>,
    delta: f64,
    delta_target: f64,
    slow_source: f64,
    slow_target: f64,
    /// Angle in the y plane of the slow stable direction at the target.
    arrival: f64,
    segments: usize,
    steps: usize,
}

impl Connection {
    const N: usize = 4;

    fn new(params: &ModelParams, cfg: &ShootingConfig) -> Result<Self> {
        let ts = theta_star(params)?;
        let (d_t, c) = target_linearization(params, &ts);
        let p = lyapunov(&d_t.transpose(), &c)?;
        let p = (&p + p.transpose()) * 0.5;
        // keeps the terminal point within eta of the target
        let delta_target = 0.9 * cfg.eta / (1.0 + p.norm().powi(2)).sqrt();
        Ok(Self {
            params: *params,
            ystar: params.endemic_state()?,
            theta_star: ts,
            v: unstable_graph(params)?,
            p,
            delta: cfg.delta,
            delta_target,
            slow_source: slowest_rate(&ou_drift_matrix(params)),
            slow_target: slowest_rate(&d_t),
            arrival: slow_direction(&d_t).atan2(1.0),
            segments: cfg.segments.max(2),
            steps: cfg.segment_steps.max(1),
        })
    }

    fn unknowns(&self) -> usize {
        Self::N * (self.segments - 1) + 4
    }

    /// Start point and its derivative in the start angle.
    fn source(&self, angle: f64) -> (Vec<f64>, Vec<f64>) {
        let (u, du) = (unit(angle), unit(angle + std::f64::consts::FRAC_PI_2));
        let lift = |u: [f64; 2], base: &[f64]| -> Vec<f64> {
            let th = [self.delta * u[0], self.delta * u[1]];
            let mut z: Vec<f64> = (0..2).map(|i| base[i] + self.v[(i, 0)] * th[0] + self.v[(i, 1)] * th[1]).collect();
            z.extend(th);
            z
        };
        (lift(u, &self.ystar), lift(du, &[0.0, 0.0]))
    }

    /// End point and its derivative in the end angle.
    fn sink(&self, angle: f64) -> (Vec<f64>, Vec<f64>) {
        let (u, du) = (unit(angle), unit(angle + std::f64::consts::FRAC_PI_2));
        let lift = |u: [f64; 2], base: &[f64]| -> Vec<f64> {
            let y = [self.delta_target * u[0], self.delta_target * u[1]];
            let mut z = y.to_vec();
            z.extend((0..2).map(|i| base[i] + self.p[(i, 0)] * y[0] + self.p[(i, 1)] * y[1]));
            z
        };
        (lift(u, &self.theta_star), lift(du, &[0.0, 0.0]))
    }

    /// Start state of segment `j`.
    fn start(&self, x: &[f64], j: usize) -> Vec<f64> {
        let n = Self::N;
        if j == 0 { self.source(x[0]).0 } else { x[1 + (j - 1) * n..1 + j * n].to_vec() }
    }

    fn duration(&self, x: &[f64]) -> f64 {
        x[x.len() - 2]
    }

    fn unfolding(&self, x: &[f64]) -> f64 {
        x[x.len() - 1]
    }

    fn end_angle(&self, x: &[f64]) -> f64 {
        x[x.len() - 3]
    }

    /// Logistic blend of the two equilibria, bent by `bump` across the
    /// momentum plane.
    fn guess(&self, bump: f64) -> Vec<f64> {
        let m = self.segments;
        let escape = (1.0 / self.delta).ln() / self.slow_source;
        let t_end = escape + (1.0 / self.delta_target).ln() / self.slow_target;
        let ts = &self.theta_star;
        let scale = norm(ts);
        let across = [-ts[1] / scale, ts[0] / scale];
        let mut x = vec![ts[1].atan2(ts[0])];
        for j in 1..m {
            let t = j as f64 / m as f64 * t_end;
            let s = 1.0 / (1.0 + (-(t - escape).clamp(-50.0, 50.0)).exp());
            let arch = bump * scale * (std::f64::consts::PI * s).sin();
            x.extend((0..2).map(|i| (1.0 - s) * self.ystar[i]));
            x.extend((0..2).map(|i| s * ts[i] + arch * across[i]));
        }
        x.extend([self.arrival, t_end, 0.0]);
        x
    }

    fn ends(&self, x: &[f64], exec: Execution) -> Vec<Vec<f64>> {
        let h = self.duration(x) / self.segments as f64;
        let eps = self.unfolding(x);
        map_range(exec, self.segments, |j| rk4(&self.params, &self.start(x, j), h, self.steps, eps, None))
    }

    fn residual(&self, x: &[f64], ends: &[Vec<f64>]) -> Vec<f64> {
        let m = self.segments;
        let mut r = Vec::with_capacity(Self::N * m);
        for j in 0..m - 1 {
            let w = self.weight(j);
            r.extend(ends[j].iter().zip(self.start(x, j + 1)).map(|(a, b)| w * (a - b)));
        }
        let (goal, _) = self.sink(self.end_angle(x));
        let w = self.weight(m - 1);
        r.extend(ends[m - 1].iter().zip(&goal).map(|(a, b)| w * (a - b)));
        r
    }

    /// Row weight of matching block `j`. The end blocks are measured against
    /// the launch radii; unweighted, a path that skips the escape and the
    /// approach leaves only an `O(delta)` residual and traps the solver.
    fn weight(&self, j: usize) -> f64 {
        if j == 0 {
            1e-2 / self.delta
        } else if j + 1 == self.segments {
            1e-2 / self.delta_target
        } else {
            1.0
        }
    }

    fn residual_norm(&self, x: &[f64], exec: Execution) -> f64 {
        if !(self.duration(x) > 0.0) {
            return f64::INFINITY;
        }
        let v = norm(&self.residual(x, &self.ends(x, exec)));
        if v.is_finite() { v } else { f64::INFINITY }
    }

    /// Residual and Jacobian; the segment blocks are exact derivatives of the
    /// RK4 map.
    fn linearize(&self, x: &[f64], exec: Execution) -> (Vec<f64>, DMatrix<f64>) {
        let (n, m) = (Self::N, self.segments);
        let h = self.duration(x) / m as f64;
        let eps = self.unfolding(x);
        let flows = map_range(exec, m, |j| rk4_variational(&self.params, &self.start(x, j), h, self.steps, eps));
        let ends: Vec<Vec<f64>> = flows.iter().map(|f| f.0.clone()).collect();
        let r = self.residual(x, &ends);
        let cols = self.unknowns();
        let (end_angle, tc, ec) = (cols - 3, cols - 2, cols - 1);
        let mut jac = DMatrix::zeros(n * m, cols);
        let (_, d_source) = self.source(x[0]);
        for (j, (_, phi)) in flows.iter().enumerate() {
            let row = j * n;
            for i in 0..n {
                if j == 0 {
                    jac[(row + i, 0)] = (0..n).map(|c| phi[(i, c)] * d_source[c]).sum();
                } else {
                    for c in 0..n {
                        jac[(row + i, 1 + (j - 1) * n + c)] = phi[(i, c)];
                    }
                }
                if j + 1 < m {
                    jac[(row + i, 1 + j * n + i)] -= 1.0;
                }
                jac[(row + i, tc)] = phi[(i, n)] / m as f64;
                jac[(row + i, ec)] = phi[(i, n + 1)];
            }
        }
        let (_, d_sink) = self.sink(x[end_angle]);
        for i in 0..n {
            jac[((m - 1) * n + i, end_angle)] = -d_sink[i];
        }
        for j in [0, m - 1] {
            jac.rows_mut(j * n, n).scale_mut(self.weight(j));
        }
        (r, jac)
    }

    /// Levenberg-Marquardt on the SVD of the Jacobian, which stays usable
    /// when the system is nearly singular far from the solution.
    fn solve(&self, mut x: Vec<f64>, exec: Execution) -> (Vec<f64>, f64) {
        let mut current = self.residual_norm(&x, exec);
        let mut mu = 0.0;
        let mut history = vec![current];
        for _ in 0..NEWTON_ITERATIONS {
            if !(current > RESIDUAL_TOL && current.is_finite()) {
                break;
            }
            let (r, jac) = self.linearize(&x, exec);
            // the SVD does not terminate on non-finite input
            if !jac.iter().all(|v| v.is_finite()) {
                break;
            }
            // unit columns, so the damping treats the angles (scale delta)
            // like the state coordinates
            let scale: Vec<f64> = jac.column_iter().map(|c| 1.0 / c.norm().max(f64::MIN_POSITIVE)).collect();
            let mut scaled = jac;
            for (j, sc) in scale.iter().enumerate() {
                scaled.column_mut(j).scale_mut(*sc);
            }
            let svd = scaled.svd(true, true);
            let (Some(u), Some(vt)) = (svd.u.as_ref(), svd.v_t.as_ref()) else { break };
            let sigma = &svd.singular_values;
            let top = sigma.max();
            let ur = u.transpose() * DVector::from_vec(r);
            let step = |mu: f64| -> Vec<f64> {
                let damped = DVector::from_fn(sigma.len(), |i, _| {
                    let s = sigma[i];
                    if s > 1e-13 * top { -ur[i] * s / (s * s + mu) } else { 0.0 }
                });
                (vt.transpose() * damped).iter().zip(&scale).map(|(d, sc)| d * sc).collect()
            };
            let mut accepted = false;
            // damped Gauss-Newton first; it follows the slow shifts of the
            // path along itself much faster than a damped LM step
            let newton = step(0.0);
            let mut lam = 1.0;
            while lam > 1e-3 {
                let trial: Vec<f64> = x.iter().zip(&newton).map(|(a, d)| a + lam * d).collect();
                let value = self.residual_norm(&trial, exec);
                if value < (1.0 - 1e-4 * lam) * current {
                    x = trial;
                    current = value;
                    accepted = true;
                    break;
                }
                lam *= 0.5;
            }
            while !accepted && mu <= 1e8 * top * top {
                let trial: Vec<f64> = x.iter().zip(step(mu)).map(|(a, d)| a + d).collect();
                let value = self.residual_norm(&trial, exec);
                if value < current {
                    x = trial;
                    current = value;
                    mu = if mu < 1e-12 * top * top { 0.0 } else { mu / 3.0 };
                    accepted = true;
                    break;
                }
                mu = (4.0 * mu).max(1e-10 * top * top);
            }
            history.push(current);
            // no real progress over the last few steps means a local minimum
            let len = history.len();
            let stalled = len > STALL_STEPS && current > 0.9 * history[len - 1 - STALL_STEPS];
            if !accepted || stalled {
                break;
            }
        }
        (x, current)
    }

    /// Converged, ends within `eta` of the target, and arrives from the
    /// side of non-negative prevalence.
    fn accepts(&self, x: &[f64], residual: f64, eta: f64) -> bool {
        let u = unit(self.end_angle(x));
        residual < ACCEPT_TOL && u[0] > 0.0 && u[1] > 0.0 && self.terminal_miss(x, Execution::Sequential) <= eta
    }

    fn terminal_miss(&self, x: &[f64], exec: Execution) -> f64 {
        let end = self.ends(x, exec).pop().unwrap_or_default();
        let mut target = vec![0.0; 2];
        target.extend(&self.theta_star);
        distance_to_target(&end, &target)
    }

    /// Samples the converged path, `refine` RK4 steps per shooting step.
    fn sample(&self, x: &[f64], refine: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let m = self.segments;
        let h = self.duration(x) / m as f64;
        let per = self.steps * refine;
        let mut states = vec![self.start(x, 0)];
        for j in 0..m {
            rk4(&self.params, &self.start(x, j), h, per, self.unfolding(x), Some(&mut states));
        }
        let times = (0..states.len()).map(|i| i as f64 * h / per as f64).collect();
        (times, states)
    }
}

/// Solves at `max(R0, SEED_R0)` from the guess bent by `bump`, then steps
/// R0 down to the target, halving the step whenever a solve fails.
fn track(params: &ModelParams, cfg: &ShootingConfig, bump: f64) -> Result<(Vec<f64>, f64)> {
    let rung = |r: f64| Connection::new(&ModelParams::new(r * params.gamma, params.gamma, params.n_pop, params.k_stages)?, cfg);
    let goal = params.r0();
    let mut r = goal.max(SEED_R0);
    let first = rung(r)?;
    let (mut x, mut res) = first.solve(first.guess(bump), Execution::Sequential);
    let mut step = CONTINUATION_STEP;
    while r > goal && res < ACCEPT_TOL {
        let next = (r - step).max(goal);
        let (y, value) = rung(next)?.solve(x.clone(), Execution::Sequential);
        if value < ACCEPT_TOL {
            (x, res, r) = (y, value, next);
            step = (2.0 * step).min(CONTINUATION_STEP);
        } else if step > MIN_CONTINUATION_STEP {
            step *= 0.5;
        } else {
            res = value;
        }
    }
    Ok((x, res))
}

fn multiple_shooting(params: &ModelParams, target: &[f64], cfg: &ShootingConfig) -> Result<PhaseTrajectory> {
    let exact = Connection::new(params, cfg)?;
    let starts = cfg.starts.max(1);
    let runs = map_range(cfg.exec, starts, |s| {
        // 0, +0.5, -0.5, +1, -1, ..
        let bump = ((s + 1) / 2) as f64 * if s % 2 == 1 { 0.5 } else { -0.5 };
        track(params, cfg, bump)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut solutions: Vec<&Vec<f64>> = Vec::new();
    for (x, res) in &runs {
        if exact.accepts(x, *res, cfg.eta) && !solutions.iter().any(|s| s.iter().zip(x).all(|(a, b)| (a - b).abs() < 1e-6)) {
            solutions.push(x);
        }
    }
    if solutions.len() > 1 {
        log::warn!("{} distinct extinction connections at R0 = {}", solutions.len(), params.r0());
    }
    let Some(x) = solutions.first() else {
        let (x, res) = &runs[0];
        log::debug!("multiple shooting ended at residual {res:e}");
        return Err(Error::BvpFailure { closest: exact.terminal_miss(x, cfg.exec), time: exact.duration(x) });
    };
    let (times, states) = exact.sample(x, 4);
    let traj = trajectory(params, times, &states, target, cfg.delta, solutions.len());
    if !(traj.terminal_distance <= cfg.eta) {
        return Err(Error::BvpFailure { closest: traj.terminal_distance, time: *traj.times.last().unwrap() });
    }
    Ok(traj)
}

/// Action along a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionEstimate {
    /// Richardson-extrapolated trapezoid value plus the endpoint tail.
    pub value: f64,
    /// `|T_h - T_2h| / 3`.
    pub error_estimate: f64,
    /// Linearized contribution beyond the last stored point, `-theta . y`.
    pub tail: f64,
}

/// `int sum_m theta_m dy_m/dt dt` along the stored path.
pub fn action(traj: &PhaseTrajectory) -> Result<ActionEstimate> {
    let n = traj.times.len();
    if n < 5 {
        return Err(Error::InvalidArgument("trajectory too short for the action".into()));
    }
    let f: Vec<f64> = (0..n)
        .map(|i| {
            let (dy, _) = equations_of_motion(&traj.params, &traj.y[i], &traj.theta[i]);
            dy.iter().zip(&traj.theta[i]).map(|(a, b)| a * b).sum()
        })
        .collect();
    let t = &traj.times;
    let fine: f64 = (1..n).map(|i| 0.5 * (t[i] - t[i - 1]) * (f[i] + f[i - 1])).sum();
    // every other node, closing with a single step if the count is even
    let mut coarse = 0.0;
    let mut i = 0;
    while i + 2 < n {
        coarse += 0.5 * (t[i + 2] - t[i]) * (f[i + 2] + f[i]);
        i += 2;
    }
    if i + 1 < n {
        coarse += 0.5 * (t[i + 1] - t[i]) * (f[i + 1] + f[i]);
    }
    let error_estimate = (fine - coarse).abs() / 3.0;
    if error_estimate > 1e-4 {
        return Err(Error::InsufficientResolution { what: "action quadrature", estimate: error_estimate });
    }
    let last = n - 1;
    let tail = -traj.y[last].iter().zip(&traj.theta[last]).map(|(y, th)| y * th).sum::<f64>();
    Ok(ActionEstimate { value: fine + (fine - coarse) / 3.0 + tail, error_estimate, tail })
}

/// `int_0^{y*} ln(R0 (1 - y)) dy` by adaptive quadrature (k = 1 action).
pub fn action_1d(params: &ModelParams) -> Result<f64> {
    let r0 = params.r0();
    let ystar = params.endemic_fraction()?;
    Ok(integrate(|y| (r0 * (1.0 - y)).ln(), 0.0, ystar, 64, 1e-15, 1e-14).value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::{action_closed_form, hamiltonian, ou_noise_matrix, s_k};

    fn params(r0: f64, k: u32) -> ModelParams {
        ModelParams::new(r0, 1.0, 100, k).unwrap()
    }

    #[test]
    fn equilibria_are_stationary() {
        for k in 1..=3 {
            let p = params(1.5, k);
            let ystar = p.endemic_state().unwrap();
            let (dy, dth) = equations_of_motion(&p, &ystar, &vec![0.0; k as usize]);
            assert!(dy.iter().chain(&dth).all(|v| v.abs() < 1e-15));
            let ts = theta_star(&p).unwrap();
            let (dy, dth) = equations_of_motion(&p, &vec![0.0; k as usize], &ts);
            assert!(dy.iter().chain(&dth).all(|v| v.abs() < 1e-12), "{dy:?} {dth:?}");
        }
    }

    #[test]
    fn zero_momentum_is_deterministic_flow() {
        let p = params(1.7, 1);
        let y = 0.31;
        let (dy, dth) = equations_of_motion(&p, &[y], &[0.0]);
        assert!((dy[0] - (1.7 * y * (1.0 - y) - y)).abs() < 1e-15);
        assert_eq!(dth[0], 0.0);
    }

    #[test]
    fn equations_are_hamiltonian_derivatives() {
        let p = params(1.4, 3);
        let y = [0.11, 0.07, 0.05];
        let th = [-0.2, -0.13, -0.04];
        let (dy, dth) = equations_of_motion(&p, &y, &th);
        let h = 1e-6;
        for i in 0..3 {
            let (mut tp, mut tm) = (th, th);
            tp[i] += h;
            tm[i] -= h;
            let d = (hamiltonian(&p, &y, &tp) - hamiltonian(&p, &y, &tm)) / (2.0 * h);
            assert!((d - dy[i]).abs() < 1e-9);
            let (mut yp, mut ym) = (y, y);
            yp[i] += h;
            ym[i] -= h;
            let d = (hamiltonian(&p, &yp, &th) - hamiltonian(&p, &ym, &th)) / (2.0 * h);
            assert!((d + dth[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn linearization_is_block_triangular() {
        let p = params(1.5, 2);
        let ystar = p.endemic_state().unwrap();
        let z0: Vec<f64> = ystar.iter().copied().chain([0.0, 0.0]).collect();
        let d = ou_drift_matrix(&p);
        let b = ou_noise_matrix(&p) / p.n();
        let h = 1e-6;
        for c in 0..4 {
            let (mut zp, mut zm) = (z0.clone(), z0.clone());
            zp[c] += h;
            zm[c] -= h;
            let (fp, fm) = (field(&p, &zp), field(&p, &zm));
            for r in 0..4 {
                let jac = (fp[r] - fm[r]) / (2.0 * h);
                let expect = match (r < 2, c < 2) {
                    (true, true) => d[(r, c)],
                    (true, false) => b[(r, c - 2)],
                    (false, true) => 0.0,
                    (false, false) => -d[(c - 2, r - 2)],
                };
                assert!((jac - expect).abs() < 1e-8, "({r},{c}) {jac} {expect}");
            }
        }
    }

    #[test]
    fn k1_path_and_action() {
        for r0 in [1.2, 1.5, 2.0] {
            let p = params(r0, 1);
            let path = extinction_path(&p).unwrap();
            assert!(path.max_abs_energy() < 1e-8);
            for (y, th) in path.y.iter().zip(&path.theta) {
                assert!((th[0] + (r0 * (1.0 - y[0])).ln()).abs() < 1e-6);
            }
            let last = path.theta.last().unwrap()[0];
            assert!((last + r0.ln()).abs() < 1e-5);
            let a = action(&path).unwrap().value;
            let exact = action_closed_form(r0).unwrap();
            assert!((a - exact).abs() < 1e-6, "R0={r0} A={a} exact={exact}");
            let quad = action_1d(&p).unwrap();
            assert!((quad - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn k2_path_matches_quasi_potential() {
        for r0 in [1.2, 1.5, 2.0] {
            let p = params(r0, 2);
            let path = extinction_path(&p).unwrap();
            assert!(path.max_abs_energy() < 1e-8, "R0={r0} H={}", path.max_abs_energy());
            assert!(path.terminal_distance <= 1e-6);
            assert_eq!(path.distinct_connections, 1);
            let ts = theta_star(&p).unwrap();
            let a = action(&path).unwrap().value;
            assert!((a - action_closed_form(r0).unwrap()).abs() < 1e-4, "R0={r0} A2={a}");
            assert!((a + s_k(&p, &ts)).abs() < 1e-4);
        }
        let ts = theta_star(&params(1.5, 2)).unwrap();
        assert!((ts[0] - 2.0 * ts[1]).abs() < 1e-14 && (ts[1] + 0.27667).abs() < 1e-5);
    }

    #[test]
    fn target_linearization_matches_field() {
        let p = params(1.5, 2);
        let ts = theta_star(&p).unwrap();
        let (d, c) = target_linearization(&p, &ts);
        let z0 = vec![0.0, 0.0, ts[0], ts[1]];
        let h = 1e-6;
        for col in 0..2 {
            let (mut zp, mut zm) = (z0.clone(), z0.clone());
            zp[col] += h;
            zm[col] -= h;
            let (fp, fm) = (field(&p, &zp), field(&p, &zm));
            for r in 0..2 {
                assert!(((fp[r] - fm[r]) / (2.0 * h) - d[(r, col)]).abs() < 1e-8);
                assert!(((fp[r + 2] - fm[r + 2]) / (2.0 * h) - c[(r, col)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn field_jacobian_matches_differences() {
        for k in 1..=3 {
            let p = params(1.6, k);
            let k = k as usize;
            let z: Vec<f64> = (0..2 * k).map(|i| if i < k { 0.1 + 0.03 * i as f64 } else { -0.2 + 0.07 * i as f64 }).collect();
            let jac = field_jacobian(&p, &z);
            let h = 1e-6;
            for c in 0..2 * k {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[c] += h;
                zm[c] -= h;
                let (fp, fm) = (field(&p, &zp), field(&p, &zm));
                for r in 0..2 * k {
                    let d = (fp[r] - fm[r]) / (2.0 * h);
                    assert!((d - jac[(r, c)]).abs() < 1e-8, "k={k} ({r},{c}) {d} {}", jac[(r, c)]);
                }
            }
        }
    }

    #[test]
    fn variational_flow_matches_rk4() {
        let p = params(1.5, 2);
        let z = [0.15, 0.1, -0.1, -0.05];
        let eps = 0.3;
        let (end, sens) = rk4_variational(&p, &z, 0.7, 30, eps);
        let plain = rk4(&p, &z, 0.7, 30, eps, None);
        assert!(end.iter().zip(&plain).all(|(a, b)| (a - b).abs() < 1e-14));
        let h = 1e-6;
        for c in 0..6 {
            let (mut zp, mut zm) = (z, z);
            let (mut tp, mut tm) = (0.7, 0.7);
            let (mut xp, mut xm) = (eps, eps);
            match c {
                0..=3 => {
                    zp[c] += h;
                    zm[c] -= h;
                }
                4 => {
                    tp += h;
                    tm -= h;
                }
                _ => {
                    xp += h;
                    xm -= h;
                }
            }
            let (ep, em) = (rk4(&p, &zp, tp, 30, xp, None), rk4(&p, &zm, tm, 30, xm, None));
            for r in 0..4 {
                assert!(((ep[r] - em[r]) / (2.0 * h) - sens[(r, c)]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn k2_launch_offset_insensitivity() {
        let p = params(1.5, 2);
        let a = action(&extinction_path(&p).unwrap()).unwrap().value;
        let cfg = ShootingConfig { delta: 1e-7, ..Default::default() };
        let b = action(&extinction_path_with(&p, &cfg).unwrap()).unwrap().value;
        assert!((a - b).abs() < 1e-5);
    }

    #[test]
    fn launch_offset_insensitivity() {
        let p = params(1.5, 1);
        let a = action(&extinction_path(&p).unwrap()).unwrap().value;
        let cfg = ShootingConfig { delta: 1e-7, ..Default::default() };
        let b = action(&extinction_path_with(&p, &cfg).unwrap()).unwrap().value;
        assert!((a - b).abs() < 1e-5);
    }

    #[test]
    fn csv_export() {
        let p = params(1.5, 1);
        let path = extinction_path(&p).unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,y1,theta1,H"));
        assert_eq!(lines.count(), path.times.len());
    }

    #[test]
    fn below_threshold_has_no_path() {
        assert!(extinction_path(&params(0.9, 1)).is_err());
    }
}
