//! Command-line front end: run a scenario end to end or list the available ones.
//!
//! Exit codes: `0` when the run finished and every enabled check passed, `1` when a
//! check failed (or on ordinary runtime errors), `2` for configuration problems
//! (unknown names, malformed JSON, bad flags), `3` when the solver diverged — the
//! partial report is still written in that case.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bsvie::scenario::{catalog, resolve_scenario, run_scenario, RunReport};
use bsvie::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bsvie",
    version,
    about = "Regression Monte Carlo laboratory for backward stochastic Volterra integral equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario; writes report.json, solution_Y.csv, solution_Z.csv, iterates.csv.
    Run {
        /// Path to a scenario JSON file, or the name of a bundled scenario.
        #[arg(long)]
        config: String,
        /// Override the scenario's random seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of worker threads (default: one per core).
        #[arg(long)]
        threads: Option<usize>,
        /// Directory the report and CSV tables are written to.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Comma-separated subset of checks to keep enabled (others are disabled).
        #[arg(long, value_delimiter = ',')]
        checks: Option<Vec<String>>,
    },
    /// List bundled scenarios, plus any *.json files in a directory.
    List {
        /// Directory with additional scenario files to include in the listing.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn run_command(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run {
            config,
            seed,
            threads,
            out,
            checks,
        } => {
            let mut sc = resolve_scenario(&config)?;
            if let Some(seed) = seed {
                sc.ensemble.seed = seed;
            }
            let report = match threads {
                Some(k) => {
                    let pool = rayon::ThreadPoolBuilder::new()
                        .num_threads(k)
                        .build()
                        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
                    pool.install(|| run_scenario(&sc, &out, checks.as_deref()))?
                }
                None => run_scenario(&sc, &out, checks.as_deref())?,
            };
            print_summary(&report, &out);
            Ok(if report.all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::List { dir } => {
            for entry in catalog(dir.as_deref())? {
                match &entry.parse_error {
                    Some(err) => println!(
                        "{:<18} {:<9} [warning: does not parse: {err}]",
                        entry.name, entry.origin
                    ),
                    None => println!(
                        "{:<18} {:<9} {}",
                        entry.name, entry.origin, entry.description
                    ),
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn print_summary(report: &RunReport, out: &std::path::Path) {
    println!(
        "scenario {} (seed {}, solver {})",
        report.scenario, report.seed, report.solver_kind
    );
    if let Some(solver) = &report.solver {
        println!(
            "  iterations: {} (converged: {})",
            solver.iterations, solver.converged
        );
    }
    let c = &report.checks;
    if let (Some(max), Some(tol)) = (c.residual_max, c.residual_tol) {
        println!(
            "  residual        {}  max {max:.3e} vs tol {tol:.3e}",
            pass_str(max <= tol)
        );
    }
    if let (Some(max), Some(tol)) = (c.m_identity_max, c.m_identity_tol) {
        println!(
            "  m_identity      {}  max {max:.3e} vs tol {tol:.3e}",
            pass_str(max <= tol)
        );
    }
    if let Some(chk) = &c.weighted_energy {
        println!(
            "  weighted_energy {}  ratio {:.3}",
            pass_str(chk.pass),
            chk.ratio
        );
    }
    if let Some(chk) = &c.per_time {
        println!(
            "  per_time        {}  max ratio {:.3} (smallest passing constant {:.3})",
            pass_str(chk.pass),
            chk.max_ratio,
            chk.smallest_passing_c
        );
    }
    if let Some(chk) = &c.lower_energy {
        println!(
            "  lower_energy    {}  ratio {:.3}",
            pass_str(chk.pass),
            chk.ratio
        );
    }
    if let Some(chk) = &c.gronwall {
        println!(
            "  gronwall        {}  sup mass {:.3e} vs bound {:.3e}",
            pass_str(chk.consistent),
            chk.sup_mass,
            chk.bound
        );
    }
    if let Some(m) = &c.monitor {
        if m.consistent {
            println!("  monitor         {}", pass_str(true));
        } else {
            println!("  monitor         {}  {}", pass_str(false), m.reasons.join("; "));
        }
    }
    println!(
        "overall: {} (outputs in {})",
        pass_str(report.all_passed),
        out.display()
    );
}

fn pass_str(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
