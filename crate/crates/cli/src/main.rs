//! Writes the data behind each figure, or a custom table, as CSV.
//!
//! Exit codes: 0 success, 2 invalid arguments, 3 numerical failure.

mod spec;
mod table;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::error;

use spec::{parse_grid, parse_methods, Figure, Grid, MethodList, Overrides, RunSpec};
use table::Table;

#[derive(Debug, Parser)]
#[command(name = "sis-extinction", version, about = "Expected extinction times for stochastic SIS models, as CSV")]
struct Cli {
    /// Figure whose data to produce, or `custom` with explicit parameters.
    #[arg(long, value_enum, default_value_t = Figure::Custom)]
    figure: Figure,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Population sizes, e.g. `50,100,200` or `10:100:10`.
    #[arg(long, value_parser = parse_grid)]
    n_grid: Option<Grid>,
    /// Number of infectious stages.
    #[arg(long)]
    k: Option<u32>,
    /// Initial infective counts for fixed-start tables.
    #[arg(long, value_parser = parse_grid)]
    i_grid: Option<Grid>,
    /// Seed for the Monte Carlo column.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output file; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated method tags (Exact, Det, Lin, DSS, KL, AD, OU, FPE, BBN, H, Diff, MC).
    #[arg(long, value_parser = parse_methods)]
    methods: Option<MethodList>,
    /// Boundary refinement factor for the two-stage diffusion mesh.
    #[arg(long, default_value_t = 1)]
    fem_density: usize,
    /// Adds a Gillespie column with this many paths per row.
    #[arg(long, default_value_t = 0)]
    mc_paths: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let overrides = Overrides {
        beta: cli.beta,
        gamma: cli.gamma,
        k: cli.k,
        n_grid: cli.n_grid.map(|g| g.0),
        i_grid: cli.i_grid.map(|g| g.0),
        methods: cli.methods.map(|m| m.0),
        seed: cli.seed,
        mc_paths: cli.mc_paths,
        fem_density: cli.fem_density,
    };
    let spec = match RunSpec::resolve(cli.figure, overrides) {
        Ok(s) => s,
        Err(msg) => {
            eprintln!("invalid run: {msg}");
            return ExitCode::from(2);
        }
    };
    let table = match Table::compute(&spec) {
        Ok(t) => t,
        Err(e) => {
            error!("{} failed: {}", e.method, e.source);
            eprintln!("numerical failure in {}: {}", e.method, e.source);
            return ExitCode::from(3);
        }
    };
    let written = match &cli.out {
        Some(path) => File::create(path).and_then(|f| {
            let mut w = BufWriter::new(f);
            table.write(&spec, &mut w)?;
            w.flush()
        }),
        None => table.write(&spec, io::stdout().lock()),
    };
    if let Err(e) = written {
        eprintln!("cannot write output: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
