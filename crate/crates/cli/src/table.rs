//! Evaluates the requested methods over the grid and writes the CSV.

use std::io::Write;

use log::{debug, info, warn};
use sis_extinction::approx::*;
use sis_extinction::diffusion1d::{tau_diff_integral, tau_diff_integral_batch, QuadratureConfig};
use sis_extinction::exact::norden_all;
use sis_extinction::fem::{build_mesh, solve_backward, BoundaryDensities, Domain2D};
use sis_extinction::par::{map_slice, Execution};
use sis_extinction::*;

use crate::spec::{Mode, RunSpec};

/// Largest state space solved exactly: the `k = 2, N = 300` chain.
pub const MAX_EXACT_STATES: usize = 300 * 303 / 2;

/// Simulations whose expected event count exceeds this are skipped.
const MAX_MC_EVENTS: f64 = 1e10;

#[derive(Debug, Clone, PartialEq)]
enum Cell {
    /// A time, or a plain value for exponent tables.
    Linear(f64),
    /// Natural log of a time that may overflow.
    Ln(f64),
    /// Not computed; `regime` marks methods that do not apply to the run at all.
    Na { reason: String, regime: bool },
}

#[derive(Debug)]
pub struct NumericalError {
    pub method: &'static str,
    pub source: Error,
}

type CellResult = std::result::Result<Cell, NumericalError>;

fn cell(method: Method, r: Result<f64>, wrap: fn(f64) -> Cell) -> CellResult {
    match r {
        Ok(v) => Ok(wrap(v)),
        Err(e) => match e {
            Error::NotApplicable { .. } | Error::NoEndemicEquilibrium { .. } => {
                Ok(Cell::Na { reason: e.to_string(), regime: true })
            }
            Error::OutOfDomain { .. } | Error::TooLarge { .. } | Error::InvalidArgument(_) => {
                Ok(Cell::Na { reason: e.to_string(), regime: false })
            }
            _ => Err(NumericalError { method: method.tag(), source: e }),
        },
    }
}

fn not_applicable(method: Method, reason: &str) -> Cell {
    Cell::Na { reason: format!("{} is not applicable: {reason}", method.tag()), regime: true }
}

struct Row {
    keys: Vec<String>,
    cells: Vec<Cell>,
}

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn row_seed(seed: u64, row: usize) -> u64 {
    seed.wrapping_add(row as u64)
}

fn monte_carlo(spec: &RunSpec, p: &ModelParams, start: Start, exact: Option<f64>, seed: u64) -> CellResult {
    let Some(tau) = exact else {
        return Ok(Cell::Na { reason: "MC needs the exact value to budget the run".into(), regime: false });
    };
    let events = tau * (p.beta + p.gamma) * p.n() * spec.mc_paths as f64;
    if events > MAX_MC_EVENTS {
        return Ok(Cell::Na { reason: format!("MC would need ~{events:.1e} events"), regime: false });
    }
    let cfg = SimConfig { exec: Execution::Sequential, ..SimConfig::new(seed, spec.mc_paths, start) };
    cell(Method::Mc, simulate_extinction_time(p, &cfg).map(|e| e.mean), Cell::Linear)
}

fn state_rows(spec: &RunSpec, n: u32, is: &[u32], first_row: usize) -> std::result::Result<Vec<Row>, NumericalError> {
    let p = spec.params(n).map_err(|e| NumericalError { method: "params", source: e })?;
    let exact = if spec.methods.contains(&Method::Exact) || spec.methods.contains(&Method::Mc) {
        Some(norden_all(&p))
    } else {
        None
    };
    let diff = if spec.methods.contains(&Method::Diff) {
        let ys: Vec<f64> = is.iter().map(|&i| f64::from(i)).collect();
        Some(tau_diff_integral_batch(&p, &ys, &QuadratureConfig::default(), Execution::Sequential))
    } else {
        None
    };
    let mut rows = Vec::with_capacity(is.len());
    for (j, &i) in is.iter().enumerate() {
        let y = f64::from(i);
        let exact_i = match &exact {
            Some(Ok(tau)) => Some(tau[i as usize - 1]),
            _ => None,
        };
        let mut cells = Vec::with_capacity(spec.methods.len());
        for &m in &spec.methods {
            cells.push(match m {
                Method::Exact => match exact.as_ref().expect("computed above") {
                    Ok(tau) => Ok(Cell::Linear(tau[i as usize - 1])),
                    Err(e) => cell(m, Err(e.clone()), Cell::Linear),
                },
                Method::Kl => cell(m, tau_kl(&p, y), Cell::Linear),
                Method::Lin => cell(m, tau_lin(&p, i), Cell::Linear),
                Method::Dss => cell(m, tau_dss(&p, y), Cell::Linear),
                Method::Det => cell(m, tau_det(&p, y), Cell::Linear),
                Method::Diff => match diff.as_ref().expect("computed above") {
                    Ok(t) => Ok(Cell::Linear(t[j])),
                    Err(e) => cell(m, Err(e.clone()), Cell::Linear),
                },
                Method::Mc => {
                    monte_carlo(spec, &p, Start::State(vec![y]), exact_i, row_seed(spec.seed, first_row + j))
                }
                _ => Ok(not_applicable(m, "needs a quasi-stationary start")),
            }?);
        }
        rows.push(Row { keys: vec![n.to_string(), i.to_string()], cells });
    }
    Ok(rows)
}

fn diffusion_from_qsd(spec: &RunSpec, p: &ModelParams) -> Result<f64> {
    match p.k() {
        1 => {
            let y0 = (p.n() * p.endemic_fraction()?).floor();
            tau_diff_integral(p, y0)
        }
        2 => {
            let densities = BoundaryDensities::default().scaled(spec.fem_density);
            let mesh = build_mesh(&Domain2D::for_params(p)?, &densities)?;
            let q = solve_backward(p, &mesh)?.query_at_endemic(p)?;
            debug!("N={}: FEM vertex {:?}, {:.3} from N y*", p.n_pop, q.position, q.distance);
            Ok(q.value)
        }
        _ => Err(Error::NotApplicable { method: "Diff", reason: "the diffusion solve covers k <= 2".into() }),
    }
}

fn qsd_row(spec: &RunSpec, n: u32, row: usize) -> std::result::Result<Row, NumericalError> {
    let p = spec.params(n).map_err(|e| NumericalError { method: "params", source: e })?;
    let wants_exact = spec.methods.contains(&Method::Exact) || spec.methods.contains(&Method::Mc);
    let qsd = if !wants_exact {
        None
    } else {
        match StateSpace::for_params(&p) {
            Ok(space) if space.size() > MAX_EXACT_STATES => {
                Some(Err(Error::TooLarge { size: space.size(), limit: MAX_EXACT_STATES }))
            }
            Ok(_) => Some(quasi_stationary(&p)),
            Err(e) => Some(Err(e)),
        }
    };
    let tau_q = match &qsd {
        Some(Ok(q)) => Some(q.tau_q),
        _ => None,
    };
    let mut cells = Vec::with_capacity(spec.methods.len());
    for &m in &spec.methods {
        let ln_est = |r: Result<ExtinctionEstimate>| r.map(|e| e.ln_value);
        cells.push(match m {
            Method::Exact => match qsd.as_ref().expect("computed above") {
                Ok(q) => Ok(Cell::Linear(q.tau_q)),
                Err(e) => cell(m, Err(e.clone()), Cell::Linear),
            },
            Method::Ad if p.k_stages != 1 => Ok(not_applicable(m, "classic model only; see BBN")),
            Method::Ad => cell(m, ln_est(tau_ad(&p)), Cell::Ln),
            Method::Ou => cell(m, ln_est(tau_ou(&p)), Cell::Ln),
            Method::Bbn => cell(m, ln_est(tau_bbn(&p)), Cell::Ln),
            Method::HamiltonianAction => cell(m, ln_est(tau_h(&p)), Cell::Ln),
            Method::Fpe => cell(m, ln_est(tau_fpe_asymptotic(&p)), Cell::Ln),
            Method::Diff => cell(m, diffusion_from_qsd(spec, &p), Cell::Linear),
            Method::Mc => match &qsd {
                Some(Ok(_)) => {
                    let start = Start::quasi_stationary(&p).map_err(|e| NumericalError { method: "MC", source: e })?;
                    monte_carlo(spec, &p, start, tau_q, row_seed(spec.seed, row))
                }
                _ => Ok(Cell::Na { reason: "MC needs the quasi-stationary distribution".into(), regime: false }),
            },
            _ => Ok(not_applicable(m, "needs a fixed starting state")),
        }?);
    }
    Ok(Row { keys: vec![n.to_string()], cells })
}

fn exponent_rows(spec: &RunSpec, r0s: &[f64]) -> std::result::Result<Vec<Row>, NumericalError> {
    let mut rows = Vec::new();
    for &r0 in r0s {
        let mut cells = Vec::new();
        for &m in &spec.methods {
            cells.push(match m {
                Method::Ad => cell(m, action_closed_form(r0), Cell::Linear)?,
                _ => Cell::Linear(fpe_exponent(r0)),
            });
        }
        rows.push(Row { keys: vec![format!("{r0}")], cells });
    }
    Ok(rows)
}

fn format_value(spec: &RunSpec, cell: &Cell, n: f64) -> Option<String> {
    let v = match (cell, spec.log_per_n) {
        (Cell::Linear(v), false) => *v,
        (Cell::Linear(v), true) => v.ln() / n,
        (Cell::Ln(l), false) => l.exp(),
        (Cell::Ln(l), true) => l / n,
        (Cell::Na { .. }, _) => return None,
    };
    v.is_finite().then(|| format!("{v:.11e}"))
}

impl Table {
    pub fn compute(spec: &RunSpec) -> std::result::Result<Self, NumericalError> {
        let (keys, rows): (Vec<&str>, Vec<Row>) = match &spec.mode {
            Mode::FromState(starts) => {
                let starts: Vec<Vec<u32>> = spec.n_grid.iter().map(|&n| starts.for_n(n)).collect();
                let mut offsets = vec![0];
                for s in &starts {
                    offsets.push(offsets.last().unwrap() + s.len());
                }
                let jobs: Vec<usize> = (0..spec.n_grid.len()).collect();
                let per_n = map_slice(Execution::Parallel, &jobs, |&j| {
                    if starts[j].is_empty() {
                        warn!("N={}: no starting count in range", spec.n_grid[j]);
                    }
                    state_rows(spec, spec.n_grid[j], &starts[j], offsets[j])
                });
                let mut rows = Vec::new();
                for r in per_n {
                    rows.extend(r?);
                }
                (vec!["N", "i"], rows)
            }
            Mode::FromQsd => {
                let jobs: Vec<usize> = (0..spec.n_grid.len()).collect();
                let rows = map_slice(Execution::Parallel, &jobs, |&j| qsd_row(spec, spec.n_grid[j], j));
                (vec!["N"], rows.into_iter().collect::<std::result::Result<_, _>>()?)
            }
            Mode::Exponents(r0s) => (vec!["R0"], exponent_rows(spec, r0s)?),
        };

        // drop columns for methods that do not apply to this regime at all
        let keep: Vec<bool> = (0..spec.methods.len())
            .map(|c| {
                let all_regime = !rows.is_empty() && rows.iter().all(|r| matches!(r.cells[c], Cell::Na { regime: true, .. }));
                if all_regime {
                    if let Cell::Na { reason, .. } = &rows[0].cells[c] {
                        info!("omitting {}: {reason}", spec.methods[c]);
                    }
                }
                !all_regime
            })
            .collect();
        let mut header: Vec<String> = keys.iter().map(|s| s.to_string()).collect();
        header.extend(spec.methods.iter().zip(&keep).filter(|(_, k)| **k).map(|(m, _)| m.tag().to_string()));

        let mut out = Vec::with_capacity(rows.len());
        for row in &rows {
            let n: f64 = row.keys[0].parse().unwrap_or(f64::NAN);
            let mut line = row.keys.clone();
            for (c, cell) in row.cells.iter().enumerate().filter(|(c, _)| keep[*c]) {
                let text = match cell {
                    Cell::Linear(_) | Cell::Ln(_) => format_value(spec, cell, n).unwrap_or_else(|| {
                        warn!("{} at {}: value not finite", spec.methods[c], row.keys.join("/"));
                        "NA".into()
                    }),
                    Cell::Na { reason, .. } => {
                        info!("{} at {}: NA ({reason})", spec.methods[c], row.keys.join("/"));
                        "NA".into()
                    }
                };
                line.push(text);
            }
            out.push(line);
        }
        Ok(Table { header, rows: out })
    }

    pub fn write<W: Write>(&self, spec: &RunSpec, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# params: {}", spec.describe())?;
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()
    }
}
