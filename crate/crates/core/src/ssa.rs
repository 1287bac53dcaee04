//! Monte Carlo oracles: Gillespie simulation of the jump chains and
//! Euler–Maruyama simulation of their diffusion approximations.
//!
//! Every path draws from its own ChaCha8 stream: the generator is seeded
//! with [`SimConfig::seed`] and the stream id is the path index. Adding paths
//! therefore never changes the earlier ones, and the result does not depend
//! on the execution policy.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::exact::quasi_stationary;
use crate::model::{ModelParams, StateSpace, TransitionSchema};
use crate::par::{map_range, Execution};

/// Where each path starts.
#[derive(Debug, Clone, PartialEq)]
pub enum Start {
    /// Counts per stage. Jump chains need whole numbers.
    State(Vec<f64>),
    /// A state drawn per path with the given weights.
    Sampled { states: Vec<Vec<u32>>, weights: Vec<f64> },
}

impl Start {
    /// Start drawn from the exact quasi-stationary distribution.
    pub fn quasi_stationary(params: &ModelParams) -> Result<Self> {
        let qsd = quasi_stationary(params)?;
        let space = StateSpace::for_params(params)?;
        Ok(Start::Sampled { states: space.states().collect(), weights: qsd.q })
    }

    /// `floor(N y*)` in every stage.
    pub fn endemic(params: &ModelParams) -> Result<Self> {
        let state = params.endemic_state()?.iter().map(|y| (params.n() * y).floor()).collect();
        Ok(Start::State(state))
    }

    fn sampler(&self) -> Result<Option<WeightedIndex<f64>>> {
        match self {
            Start::State(_) => Ok(None),
            Start::Sampled { states, weights } => {
                if states.len() != weights.len() {
                    return Err(Error::InvalidArgument("one weight per start state is needed".into()));
                }
                WeightedIndex::new(weights).map(Some).map_err(|e| Error::InvalidArgument(format!("start weights: {e}")))
            }
        }
    }

    fn draw(&self, sampler: Option<&WeightedIndex<f64>>, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match (self, sampler) {
            (Start::Sampled { states, .. }, Some(w)) => states[w.sample(rng)].iter().map(|&c| f64::from(c)).collect(),
            (Start::State(s), _) => s.clone(),
            (Start::Sampled { states, .. }, None) => states[0].iter().map(|&c| f64::from(c)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub n_paths: usize,
    pub start: Start,
    /// Paths still running at this time are censored.
    pub time_cap: f64,
    pub exec: Execution,
}

impl SimConfig {
    pub fn new(seed: u64, n_paths: usize, start: Start) -> Self {
        Self { seed, n_paths, start, time_cap: 1e9, exec: Execution::default() }
    }

    fn validate(&self, k: usize) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::InvalidArgument("n_paths must be >= 1".into()));
        }
        if !(self.time_cap > 0.0) {
            return Err(Error::InvalidArgument("time cap must be positive".into()));
        }
        let fits = match &self.start {
            Start::State(s) => s.len() == k,
            Start::Sampled { states, .. } => states.iter().all(|s| s.len() == k),
        };
        if !fits {
            return Err(Error::InvalidArgument(format!("start state must have {k} stages")));
        }
        Ok(())
    }

    fn rng(&self, path: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path as u64);
        rng
    }
}

/// Outcome of one simulated path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathOutcome {
    /// Stopping time, or the time cap for a censored path.
    pub time: f64,
    pub censored: bool,
    /// Diffusion paths only: some component went negative or the total
    /// exceeded `N`.
    pub flagged: bool,
}

/// Mean stopping time over the completed paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n_completed)`.
    pub std_error: f64,
    pub n_paths: usize,
    pub n_censored: usize,
    pub n_flagged: usize,
}

impl McEstimate {
    /// Reduces path outcomes in order, so the result is reproducible.
    pub fn from_paths(paths: &[PathOutcome]) -> Result<Self> {
        let done: Vec<f64> = paths.iter().filter(|p| !p.censored).map(|p| p.time).collect();
        let n_censored = paths.len() - done.len();
        if done.is_empty() {
            let time_cap = paths.first().map_or(0.0, |p| p.time);
            return Err(Error::TimeCapTooSmall { n_paths: paths.len(), time_cap });
        }
        if n_censored > 0 {
            log::warn!("{n_censored} of {} paths censored at the time cap", paths.len());
        }
        let n = done.len() as f64;
        let mean = done.iter().sum::<f64>() / n;
        let var = if done.len() > 1 { done.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Ok(Self {
            mean,
            std_error: (var / n).sqrt(),
            n_paths: paths.len(),
            n_censored,
            n_flagged: paths.iter().filter(|p| p.flagged).count(),
        })
    }

    /// Whether `value` lies within `z` standard errors of the mean.
    pub fn covers(&self, value: f64, z: f64) -> bool {
        (self.mean - value).abs() <= z * self.std_error
    }
}

/// One line per path: `path,time,censored,flagged`.
pub fn write_paths_csv<W: Write>(paths: &[PathOutcome], mut out: W) -> std::io::Result<()> {
    writeln!(out, "path,time,censored,flagged")?;
    for (i, p) in paths.iter().enumerate() {
        writeln!(out, "{i},{:.11e},{},{}", p.time, u8::from(p.censored), u8::from(p.flagged))?;
    }
    Ok(())
}

/// Gillespie path of a chain with integer jumps `deltas`; stops when every
/// rate is zero.
fn gillespie_path<F>(rates: F, deltas: &[Vec<i32>], mut state: Vec<u32>, cap: f64, rng: &mut ChaCha8Rng) -> PathOutcome
where
    F: Fn(&[u32], &mut [f64]) -> f64,
{
    let mut buf = vec![0.0; deltas.len()];
    let mut t = 0.0;
    loop {
        let total = rates(&state, &mut buf);
        if !(total > 0.0) {
            return PathOutcome { time: t, censored: false, flagged: false };
        }
        let wait: f64 = rng.sample(Exp1);
        t += wait / total;
        if t > cap {
            return PathOutcome { time: cap, censored: true, flagged: false };
        }
        let mut pick = rng.random::<f64>() * total;
        let mut e = 0;
        while e + 1 < buf.len() && pick >= buf[e] {
            pick -= buf[e];
            e += 1;
        }
        // rounding can land the pick on a zero-rate tail event
        while buf[e] == 0.0 {
            e -= 1;
        }
        for (s, d) in state.iter_mut().zip(&deltas[e]) {
            *s = s.wrapping_add_signed(*d);
        }
    }
}

fn whole_counts(state: &[f64]) -> Result<Vec<u32>> {
    state
        .iter()
        .map(|&c| {
            if c >= 0.0 && c.fract() == 0.0 && c <= f64::from(u32::MAX) {
                Ok(c as u32)
            } else {
                Err(Error::InvalidArgument(format!("jump-chain start needs whole counts, got {c}")))
            }
        })
        .collect()
}

/// Per-path outcomes of the Gillespie simulation of the staged SIS chain,
/// run to absorption at zero infectives.
pub fn simulate_extinction_paths(params: &ModelParams, cfg: &SimConfig) -> Result<Vec<PathOutcome>> {
    cfg.validate(params.k())?;
    let schema = TransitionSchema::new(params);
    let deltas: Vec<Vec<i32>> = schema.events().iter().map(|e| e.delta.clone()).collect();
    let sampler = cfg.start.sampler()?;
    if let Start::State(s) = &cfg.start {
        let s = whole_counts(s)?;
        if s.iter().map(|&c| u64::from(c)).sum::<u64>() > u64::from(params.n_pop) {
            return Err(Error::InvalidArgument(format!("start {s:?} exceeds N = {}", params.n_pop)));
        }
    }
    let runs = map_range(cfg.exec, cfg.n_paths, |path| {
        let mut rng = cfg.rng(path);
        let start = whole_counts(&cfg.start.draw(sampler.as_ref(), &mut rng))?;
        Ok(gillespie_path(|s, out| schema.rates_into(s, out), &deltas, start, cfg.time_cap, &mut rng))
    });
    runs.into_iter().collect()
}

/// Mean time to extinction of the staged SIS chain by Gillespie simulation.
pub fn simulate_extinction_time(params: &ModelParams, cfg: &SimConfig) -> Result<McEstimate> {
    McEstimate::from_paths(&simulate_extinction_paths(params, cfg)?)
}

/// Mean extinction time of the unbounded linear birth–death chain (birth
/// `beta i`, death `gamma i`). The start must be a single count.
pub fn simulate_linear_birth_death(beta: f64, gamma: f64, cfg: &SimConfig) -> Result<McEstimate> {
    cfg.validate(1)?;
    if !(beta >= 0.0 && gamma > 0.0) {
        return Err(Error::InvalidArgument("need beta >= 0 and gamma > 0".into()));
    }
    let sampler = cfg.start.sampler()?;
    let deltas = [vec![1], vec![-1]];
    let rates = |s: &[u32], out: &mut [f64]| {
        let i = f64::from(s[0]);
        out[0] = beta * i;
        out[1] = gamma * i;
        out[0] + out[1]
    };
    let runs = map_range(cfg.exec, cfg.n_paths, |path| {
        let mut rng = cfg.rng(path);
        let start = whole_counts(&cfg.start.draw(sampler.as_ref(), &mut rng))?;
        Ok(gillespie_path(rates, &deltas, start, cfg.time_cap, &mut rng))
    });
    McEstimate::from_paths(&runs.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Euler–Maruyama settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeConfig {
    pub step: f64,
    /// Multiplies every noise term; 0 gives the deterministic drift.
    pub noise_scale: f64,
    /// A path stops once every stage count is at or below this level.
    pub exit_level: f64,
    pub axes: AxisBoundary,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self { step: 0.01, noise_scale: 1.0, exit_level: 0.5, axes: AxisBoundary::Free }
    }
}

/// Treatment of the coordinate planes `y_m = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AxisBoundary {
    /// Components may go negative; such paths are flagged.
    #[default]
    Free,
    /// A negative stage count is pushed back to zero along the direction of
    /// the event feeding that stage (infection for stage 1, progression from
    /// the previous stage otherwise). This is the conormal direction of the
    /// diffusion matrix there, i.e. the reflecting condition of the backward
    /// equation.
    Reflect,
}

/// The diffusion in event form: each jump `e` of the chain contributes
/// `delta_e (a_e dt + sqrt(a_e) dW_e)` with independent Brownian motions.
/// For k = 1 this is the one-dimensional SDE; for k = 2 it reproduces the
/// drift and diffusion matrix of the two-stage model.
struct Diffusion {
    beta_n: f64,
    n: f64,
    stage_rate: f64,
    k: usize,
}

impl Diffusion {
    fn new(params: &ModelParams) -> Self {
        Self { beta_n: params.beta / params.n(), n: params.n(), stage_rate: params.k_stages as f64 * params.gamma, k: params.k() }
    }

    /// Rates of the k + 1 events: infection, progression out of stages
    /// 1..k-1, recovery out of stage k.
    fn rates(&self, y: &[f64], out: &mut [f64]) {
        let total: f64 = y.iter().sum();
        out[0] = self.beta_n * total * (self.n - total);
        for m in 0..self.k {
            out[m + 1] = self.stage_rate * y[m];
        }
    }

    /// One Euler–Maruyama step with Brownian increments `dw` (variance `h`).
    fn step(&self, y: &mut [f64], h: f64, noise: f64, dw: &[f64], rates: &mut [f64]) {
        self.rates(y, rates);
        let jump = |e: usize| rates[e] * h + noise * rates[e].max(0.0).sqrt() * dw[e];
        // event e moves one individual from stage e - 1 into stage e
        for e in 0..=self.k {
            let j = jump(e);
            if e < self.k {
                y[e] += j;
            }
            if e > 0 {
                y[e - 1] -= j;
            }
        }
    }

    fn reflect(&self, y: &mut [f64]) {
        for m in (0..self.k).rev() {
            if y[m] < 0.0 {
                if m > 0 {
                    y[m - 1] += y[m];
                }
                y[m] = 0.0;
            }
        }
    }

    fn outside(&self, y: &[f64]) -> bool {
        y.iter().any(|&v| v < 0.0) || y.iter().sum::<f64>() > self.n
    }
}

struct EmPath {
    y: Vec<f64>,
    stopped: Option<f64>,
    flagged: bool,
}

impl EmPath {
    fn new(y: Vec<f64>, level: f64) -> Self {
        let stopped = y.iter().all(|&v| v <= level).then_some(0.0);
        Self { y, stopped, flagged: false }
    }

    fn advance(&mut self, model: &Diffusion, t: f64, h: f64, sde: &SdeConfig, dw: &[f64], rates: &mut [f64]) {
        if self.stopped.is_some() {
            return;
        }
        model.step(&mut self.y, h, sde.noise_scale, dw, rates);
        self.flagged |= model.outside(&self.y);
        if sde.axes == AxisBoundary::Reflect {
            model.reflect(&mut self.y);
        }
        if self.y.iter().all(|&v| v <= sde.exit_level) {
            self.stopped = Some(t + h);
        }
    }

    fn outcome(&self, cap: f64) -> PathOutcome {
        match self.stopped {
            Some(time) => PathOutcome { time, censored: false, flagged: self.flagged },
            None => PathOutcome { time: cap, censored: true, flagged: self.flagged },
        }
    }
}

fn check_sde(params: &ModelParams, cfg: &SimConfig, sde: &SdeConfig) -> Result<()> {
    cfg.validate(params.k())?;
    if !(sde.step > 0.0 && sde.step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {}", sde.step)));
    }
    if !(sde.noise_scale >= 0.0 && sde.exit_level >= 0.0) {
        return Err(Error::InvalidArgument("noise scale and exit level must be >= 0".into()));
    }
    Ok(())
}

fn normals(rng: &mut ChaCha8Rng, scale: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = scale * rng.sample::<f64, _>(StandardNormal);
    }
}

/// Per-path exit times of the diffusion approximation, simulated by
/// Euler–Maruyama until every stage is at or below `sde.exit_level`.
/// Components are clamped at zero inside the square roots only.
pub fn simulate_sde_paths(params: &ModelParams, cfg: &SimConfig, sde: &SdeConfig) -> Result<Vec<PathOutcome>> {
    check_sde(params, cfg, sde)?;
    let model = Diffusion::new(params);
    let sampler = cfg.start.sampler()?;
    let h = sde.step;
    let paths = map_range(cfg.exec, cfg.n_paths, |path| {
        let mut rng = cfg.rng(path);
        let mut p = EmPath::new(cfg.start.draw(sampler.as_ref(), &mut rng), sde.exit_level);
        let (mut dw, mut rates) = (vec![0.0; model.k + 1], vec![0.0; model.k + 1]);
        let mut steps = 0u64;
        while p.stopped.is_none() && (steps as f64) * h < cfg.time_cap {
            normals(&mut rng, h.sqrt(), &mut dw);
            p.advance(&model, steps as f64 * h, h, sde, &dw, &mut rates);
            steps += 1;
        }
        p.outcome(cfg.time_cap)
    });
    Ok(paths)
}

/// Mean exit time of the diffusion approximation.
pub fn simulate_sde_exit(params: &ModelParams, cfg: &SimConfig, sde: &SdeConfig) -> Result<McEstimate> {
    McEstimate::from_paths(&simulate_sde_paths(params, cfg, sde)?)
}

/// Means at steps `h` and `h/2` on the same Brownian paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCheck {
    pub coarse: McEstimate,
    pub fine: McEstimate,
    /// `|fine - coarse| / fine`.
    pub relative_change: f64,
    /// Per-path `2 t_fine - t_coarse`, which removes the first-order step
    /// bias; paths censored at either step are censored here.
    pub extrapolated: McEstimate,
}

/// Runs the simulation at `sde.step` and at half of it, the coarse path
/// driven by the sums of pairs of fine increments, so the difference is
/// discretization rather than sampling noise.
pub fn sde_step_check(params: &ModelParams, cfg: &SimConfig, sde: &SdeConfig) -> Result<StepCheck> {
    check_sde(params, cfg, sde)?;
    let model = Diffusion::new(params);
    let sampler = cfg.start.sampler()?;
    let h = sde.step;
    let half = 0.5 * h;
    let pairs = map_range(cfg.exec, cfg.n_paths, |path| {
        let mut rng = cfg.rng(path);
        let y0 = cfg.start.draw(sampler.as_ref(), &mut rng);
        let (mut coarse, mut fine) = (EmPath::new(y0.clone(), sde.exit_level), EmPath::new(y0, sde.exit_level));
        let m = model.k + 1;
        let (mut a, mut b, mut rates) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let mut steps = 0u64;
        while (coarse.stopped.is_none() || fine.stopped.is_none()) && (steps as f64) * h < cfg.time_cap {
            let t = steps as f64 * h;
            normals(&mut rng, half.sqrt(), &mut a);
            normals(&mut rng, half.sqrt(), &mut b);
            fine.advance(&model, t, half, sde, &a, &mut rates);
            fine.advance(&model, t + half, half, sde, &b, &mut rates);
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            coarse.advance(&model, t, h, sde, &sum, &mut rates);
            steps += 1;
        }
        (coarse.outcome(cfg.time_cap), fine.outcome(cfg.time_cap))
    });
    let coarse = McEstimate::from_paths(&pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
    let fine = McEstimate::from_paths(&pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
    let combined: Vec<PathOutcome> = pairs
        .iter()
        .map(|(c, f)| PathOutcome { time: 2.0 * f.time - c.time, censored: c.censored || f.censored, flagged: c.flagged || f.flagged })
        .collect();
    let extrapolated = McEstimate::from_paths(&combined)?;
    Ok(StepCheck { coarse, fine, relative_change: (fine.mean - coarse.mean).abs() / fine.mean, extrapolated })
}

/// As [`simulate_sde_exit`] at step `h/2`, failing when halving the step
/// moves the mean by more than `tolerance` (relative).
pub fn simulate_sde_exit_checked(params: &ModelParams, cfg: &SimConfig, sde: &SdeConfig, tolerance: f64) -> Result<McEstimate> {
    let check = sde_step_check(params, cfg, sde)?;
    if check.relative_change > tolerance {
        return Err(Error::InsufficientResolution { what: "Euler-Maruyama step", estimate: check.relative_change });
    }
    Ok(check.fine)
}
