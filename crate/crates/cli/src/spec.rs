//! Figure defaults and the resolved run description.

use std::fmt;

use sis_extinction::approx::Method;
use sis_extinction::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Figure {
    Fig1,
    Fig2,
    Fig4,
    Fig5,
    Fig6,
    Fig8,
    Fig12,
    Fig16,
    Custom,
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = clap::ValueEnum::to_possible_value(self).expect("no skipped variants");
        f.write_str(name.get_name())
    }
}

/// How the starting infectives are chosen for each `N`.
#[derive(Debug, Clone, PartialEq)]
pub enum Starts {
    /// The listed counts, dropping those above `N`.
    Listed(Vec<u32>),
    /// Every count `1..=N`.
    All,
    /// `floor(fraction N)`.
    Fraction(f64),
}

impl Starts {
    pub fn for_n(&self, n: u32) -> Vec<u32> {
        match self {
            Starts::Listed(is) => is.iter().copied().filter(|&i| i >= 1 && i <= n).collect(),
            Starts::All => (1..=n).collect(),
            Starts::Fraction(f) => vec![((f * f64::from(n)).floor() as u32).max(1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    /// Mean time from fixed starting states, one row per `(N, i)`.
    FromState(Starts),
    /// Mean time from quasi-stationarity, one row per `N`.
    FromQsd,
    /// Exponential constants over an `R0` grid.
    Exponents(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub figure: Figure,
    pub beta: f64,
    pub gamma: f64,
    pub k: u32,
    pub n_grid: Vec<u32>,
    pub mode: Mode,
    pub methods: Vec<Method>,
    /// Report `ln(tau) / N` instead of `tau`.
    pub log_per_n: bool,
    pub seed: u64,
    pub mc_paths: usize,
    pub fem_density: usize,
}

/// Command-line overrides; `None` keeps the figure default.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub k: Option<u32>,
    pub n_grid: Option<Vec<u32>>,
    pub i_grid: Option<Vec<u32>>,
    pub methods: Option<Vec<Method>>,
    pub seed: u64,
    pub mc_paths: usize,
    pub fem_density: usize,
}

/// `count` log-spaced integers from `lo` to `hi`, rounded and deduplicated.
pub fn log_grid(lo: u32, hi: u32, count: usize) -> Vec<u32> {
    let (a, b) = (f64::from(lo).ln(), f64::from(hi).ln());
    let mut grid: Vec<u32> = (0..count)
        .map(|j| (a + (b - a) * j as f64 / (count - 1) as f64).exp().round() as u32)
        .collect();
    grid.dedup();
    grid
}

const DEFAULT_POINTS: usize = 20;

impl RunSpec {
    pub fn resolve(figure: Figure, o: Overrides) -> Result<Self, String> {
        use Method::*;
        let state_methods = vec![Exact, Kl, Lin, Det, Diff];
        let (beta, k, n_grid, mode, methods, log_per_n) = match figure {
            Figure::Fig1 => (0.8, 1, vec![100], Mode::FromState(Starts::All), state_methods, false),
            Figure::Fig2 => (
                0.8,
                1,
                log_grid(10, 1000, DEFAULT_POINTS),
                Mode::FromState(Starts::Listed(vec![1])),
                vec![Exact, Lin, Det, Diff],
                false,
            ),
            Figure::Fig4 => (
                0.8,
                1,
                log_grid(10, 1000, DEFAULT_POINTS),
                Mode::FromState(Starts::Fraction(0.3)),
                state_methods,
                false,
            ),
            Figure::Fig5 => (1.1, 1, log_grid(20, 1000, DEFAULT_POINTS), Mode::FromQsd, vec![Exact, Ad, Diff, Ou], false),
            Figure::Fig6 => (1.5, 1, log_grid(10, 1000, DEFAULT_POINTS), Mode::FromQsd, vec![Exact, Ad, Diff, Ou], true),
            Figure::Fig8 => {
                let r0s = (1..=40).map(|j| 1.0 + 0.05 * f64::from(j)).collect();
                (1.0, 1, Vec::new(), Mode::Exponents(r0s), vec![Ad, Fpe], false)
            }
            Figure::Fig12 => (1.1, 2, log_grid(50, 500, DEFAULT_POINTS), Mode::FromQsd, vec![Exact, Diff, Ou], false),
            Figure::Fig16 => (1.5, 2, log_grid(20, 500, DEFAULT_POINTS), Mode::FromQsd, vec![Exact, Bbn, Diff, Ou], true),
            Figure::Custom => {
                let n_grid = o.n_grid.clone().ok_or("custom runs need --n-grid")?;
                let k = o.k.unwrap_or(1);
                let beta = o.beta.ok_or("custom runs need --beta")?;
                let from_state = k == 1 && (o.i_grid.is_some() || n_grid.len() == 1);
                if from_state {
                    (beta, k, n_grid, Mode::FromState(Starts::All), vec![Exact, Kl, Lin, Dss, Det, Diff], false)
                } else {
                    (beta, k, n_grid, Mode::FromQsd, vec![Exact, Ad, Bbn, Ou, Diff], false)
                }
            }
        };
        let mut mode = mode;
        if let Some(is) = o.i_grid {
            match &mut mode {
                Mode::FromState(starts) => *starts = Starts::Listed(is),
                _ => return Err(format!("{figure} starts from quasi-stationarity; --i-grid does not apply")),
            }
        }
        let k = o.k.unwrap_or(k);
        if k == 0 {
            return Err("--k must be at least 1".into());
        }
        if matches!(mode, Mode::FromState(_)) && k != 1 {
            return Err("fixed starting states are supported for k = 1 only".into());
        }
        let mut methods = o.methods.unwrap_or(methods);
        if o.mc_paths > 0 && !methods.contains(&Method::Mc) {
            methods.push(Method::Mc);
        }
        if matches!(mode, Mode::Exponents(_)) && methods.iter().any(|m| !matches!(m, Ad | Fpe)) {
            return Err(format!("{figure} reports exponents; only AD and FPE columns are available"));
        }
        let spec = RunSpec {
            figure,
            beta: o.beta.unwrap_or(beta),
            gamma: o.gamma.unwrap_or(1.0),
            k,
            n_grid: o.n_grid.unwrap_or(n_grid),
            mode,
            methods,
            log_per_n,
            seed: o.seed,
            mc_paths: if o.mc_paths > 0 { o.mc_paths } else { 10_000 },
            fem_density: o.fem_density,
        };
        if spec.fem_density == 0 {
            return Err("--fem-density must be at least 1".into());
        }
        if !matches!(spec.mode, Mode::Exponents(_)) {
            if spec.n_grid.is_empty() || spec.n_grid.contains(&0) {
                return Err("--n-grid needs population sizes >= 1".into());
            }
            spec.params(spec.n_grid[0]).map_err(|e| e.to_string())?;
        }
        Ok(spec)
    }

    pub fn params(&self, n: u32) -> sis_extinction::Result<ModelParams> {
        ModelParams::new(self.beta, self.gamma, n, self.k)
    }

    /// Provenance line written above the header.
    pub fn describe(&self) -> String {
        let methods: Vec<&str> = self.methods.iter().map(|m| m.tag()).collect();
        let mut s = format!("figure={} beta={} gamma={} k={}", self.figure, self.beta, self.gamma, self.k);
        if !matches!(self.mode, Mode::Exponents(_)) {
            let r0 = self.beta / self.gamma;
            s += &format!(" R0={r0} methods={}", methods.join(","));
            match &self.mode {
                Mode::FromState(Starts::All) => s += " start=all",
                Mode::FromState(Starts::Listed(is)) => s += &format!(" start={is:?}"),
                Mode::FromState(Starts::Fraction(f)) => s += &format!(" start=floor({f}N)"),
                _ => s += " start=qsd",
            }
        }
        if self.log_per_n {
            s += " value=ln(tau)/N";
        }
        if self.methods.contains(&Method::Mc) {
            s += &format!(" seed={} mc_paths={}", self.seed, self.mc_paths);
        }
        if self.methods.contains(&Method::Diff) && self.k == 2 {
            s += &format!(" fem_density={}", self.fem_density);
        }
        s
    }
}

/// A parsed `--n-grid` or `--i-grid` value.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<u32>);

/// A parsed `--methods` value.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodList(pub Vec<Method>);

/// Parses `a,b,c` where each item is a number or an inclusive `lo:hi` or
/// `lo:hi:step` range.
pub fn parse_grid(text: &str) -> Result<Grid, String> {
    let mut out = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        let num = |s: &str| s.trim().parse::<u32>().map_err(|_| format!("bad grid entry '{item}'"));
        match parts.as_slice() {
            [v] => out.push(num(v)?),
            [lo, hi] => out.extend(num(lo)?..=num(hi)?),
            [lo, hi, step] => {
                let step = num(step)?;
                if step == 0 {
                    return Err(format!("zero step in '{item}'"));
                }
                out.extend((num(lo)?..=num(hi)?).step_by(step as usize));
            }
            _ => return Err(format!("bad grid entry '{item}'")),
        }
    }
    if out.is_empty() {
        return Err("empty grid".into());
    }
    Ok(Grid(out))
}

pub fn parse_methods(text: &str) -> Result<MethodList, String> {
    let mut out = Vec::new();
    for tag in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m = Method::from_tag(tag).ok_or_else(|| format!("unknown method '{tag}'"))?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err("empty method list".into());
    }
    Ok(MethodList(out))
}
