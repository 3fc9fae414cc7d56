use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use eulerian_cutfem::stepper::{BcMode, Scheme, SchemeConfig};
use eulerian_cutfem::study::{run_study, ReferenceMode, StudyConfig, StudyPaths};

#[derive(Clone, Debug)]
struct Levels(Vec<u32>);

/// Parses `a..b` (inclusive), `a,b,c` or a single level.
fn parse_levels(s: &str) -> Result<Levels, String> {
    let num = |t: &str| t.trim().parse::<u32>().map_err(|e| format!("bad level {t:?}: {e}"));
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(format!("empty range {s:?}"));
        }
        return Ok(Levels((a..=b).collect()));
    }
    s.split(',').map(num).collect::<Result<_, _>>().map(Levels)
}

/// Runs a space-time convergence study of the Eulerian solver.
#[derive(Parser, Debug)]
#[command(name = "study")]
struct Args {
    #[arg(long, value_enum, default_value_t = Scheme::Bdf1)]
    scheme: Scheme,
    #[arg(long, value_enum, default_value_t = BcMode::Lagrange)]
    bc: BcMode,
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Spatial levels, h = h0 * 2^-Lx.
    #[arg(long, default_value = "0..3", value_parser = parse_levels)]
    lx: Levels,
    /// Temporal levels, dt = dt0 * 2^-Lt.
    #[arg(long, default_value = "0..4", value_parser = parse_levels)]
    lt: Levels,
    #[arg(long, default_value_t = 0.1)]
    gamma_s: f64,
    #[arg(long, default_value_t = 0.01)]
    gamma_lambda: f64,
    #[arg(long, default_value_t = 2.0)]
    c_delta: f64,
    #[arg(long, default_value_t = 1.0)]
    tend: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ReferenceMode::Ale)]
    reference: ReferenceMode,
    #[arg(long, default_value_t = 0.1)]
    h0: f64,
    #[arg(long, default_value_t = 0.02)]
    dt0: f64,
    /// Compute rates between all neighbouring cells.
    #[arg(long)]
    full_grid_rates: bool,
    /// Directory for cached trajectories.
    #[arg(long)]
    cache: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let config = StudyConfig {
        h0: args.h0,
        dt0: args.dt0,
        lx: args.lx.0,
        lt: args.lt.0,
        scheme: SchemeConfig {
            k: args.k,
            scheme: args.scheme,
            bc_mode: args.bc,
            gamma_s: args.gamma_s,
            gamma_lambda: args.gamma_lambda,
            c_delta: args.c_delta,
            t_end: args.tend,
            ..SchemeConfig::default()
        },
        reference: args.reference,
        full_grid_rates: args.full_grid_rates,
    };
    let paths = StudyPaths {
        out: Some(args.out.clone()),
        cache: args.cache,
    };
    match run_study(&config, &paths) {
        Ok(out) => {
            let failed = out.report.cells.iter().filter(|c| c.failed).count();
            log::info!(
                "wrote {} cells ({failed} failed) to {}",
                out.rows.len(),
                args.out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("study: {e}");
            ExitCode::FAILURE
        }
    }
}
