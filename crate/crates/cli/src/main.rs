mod commands;
mod config;
mod output;
mod verify;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{Failure, Outcome};
use crate::output::{config_hash, write_json, RunManifest, Table};

#[derive(Parser)]
#[command(name = "mfg-lqg", version, about = "LQG and major-minor mean-field game solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (capacity hint; results do not depend on it).
    #[arg(long, global = true, env = "MFG_LQG_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON problem configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Single-agent LQG: Riccati, offset, gains and optimal cost.
    SolveLqg(RunArgs),
    /// Major-minor game: consistency fixed point and equilibrium laws.
    SolveMfg(RunArgs),
    /// Finite-population simulation, costs and mean-field convergence.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Master seed; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Epsilon-Nash gaps across population sizes.
    NashGap(RunArgs),
    /// Run the bundled self-checks and print a pass/fail matrix.
    Verify {
        #[arg(long)]
        out: PathBuf,
        /// Directory whose fixture files replace the bundled ones.
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
}

fn configure_threads(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads.filter(|&n| n > 0) {
        // a pool may already exist when embedded; the hint is then ignored
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

fn run_command(
    name: &str,
    run: &RunArgs,
    seed: Option<u64>,
    threads: Option<usize>,
    f: impl FnOnce(&[u8], &Path) -> Outcome,
) -> ExitCode {
    let bytes = match fs::read(&run.config) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", run.config.display());
            return ExitCode::from(2);
        }
    };
    if let Err(e) = fs::create_dir_all(&run.out) {
        eprintln!("error: cannot create {}: {e}", run.out.display());
        return ExitCode::from(1);
    }
    match f(&bytes, &run.out) {
        Ok(timings) => {
            let manifest = RunManifest {
                command: name.into(),
                config_path: Some(run.config.clone()),
                config_sha256: Some(config_hash(&bytes)),
                master_seed: seed,
                version: env!("CARGO_PKG_VERSION").into(),
                output_dir: run.out.clone(),
                threads,
                timings,
            };
            if let Err(e) = write_json(&run.out, "manifest.json", &manifest) {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
        Err(e) => report(&e),
    }
}

fn config_seed(path: &Path) -> Option<u64> {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(path).ok()?).ok()?;
    v.get("seed")?.as_u64()
}

fn report(e: &Failure) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code())
}

fn verify(out: &Path, fixtures: Option<&Path>) -> ExitCode {
    if let Err(e) = fs::create_dir_all(out) {
        eprintln!("error: cannot create {}: {e}", out.display());
        return ExitCode::from(1);
    }
    let results = verify::run(fixtures);
    let mut table = Table::new(&["suite", "status", "detail"]);
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status:4}  {:28} {}", r.suite, r.detail);
        table.row(&[r.suite.into(), status.into(), format!("\"{}\"", r.detail.replace('"', "'"))]);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    let written = table
        .write(out, "verify.csv")
        .and_then(|_| write_json(out, "summary.json", &serde_json::json!({"command": "verify", "suites": results})));
    if let Err(e) = written {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    ExitCode::from(failed.min(125) as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads(cli.threads);
    let threads = cli.threads;
    match &cli.command {
        Command::SolveLqg(run) => run_command("solve-lqg", run, None, threads, commands::solve_lqg),
        Command::SolveMfg(run) => run_command("solve-mfg", run, None, threads, commands::solve_mfg),
        Command::Simulate { run, seed } => {
            let seed = *seed;
            let recorded = seed.or_else(|| config_seed(&run.config)).or(Some(0));
            run_command("simulate", run, recorded, threads, |bytes, out| commands::simulate(bytes, out, seed))
        }
        Command::NashGap(run) => run_command("nash-gap", run, None, threads, commands::nash_gap),
        Command::Verify { out, fixtures } => verify(out, fixtures.as_deref()),
    }
}
