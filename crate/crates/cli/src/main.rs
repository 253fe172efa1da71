//! `tonelli`: batch runs of the periodic-orbit library from a TOML config.
//!
//! Records go to JSON-lines files under the output directory, spectra to
//! CSV and plottable traces to two-column text files. Every record carries
//! the config hash, RNG seed, tool version and tolerances. The worker
//! count is read from `TONELLI_WORKERS`.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use output::OutDir;

#[derive(Parser)]
#[command(
    name = "tonelli",
    version,
    about = "Periodic orbits of Tonelli Lagrangians on the 2-torus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Energy level, overriding `k`.
    #[arg(long)]
    k: Option<f64>,
    /// Points per constructed loop, overriding `h`.
    #[arg(long)]
    h: Option<usize>,
    /// RNG seed, overriding `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `out` (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Critical loops from reference seeds or a minimizer search.
    Orbit(Common),
    /// Minimax levels c(n, k) and the distinct orbits they produce.
    Minimax {
        #[command(flatten)]
        common: Common,
        /// Largest iterate level, overriding `minimax.n_max`.
        #[arg(long)]
        n_max: Option<usize>,
    },
    /// e₀ and certified bounds on the critical value.
    Mane {
        #[command(flatten)]
        common: Common,
        /// Re-verify the certificates after computing them.
        #[arg(long)]
        verify: bool,
    },
    /// Hessian spectra, iterate indices and nullity classes of recorded orbits.
    Spectrum {
        #[command(flatten)]
        common: Common,
        /// JSON-lines file with orbit records.
        #[arg(long)]
        orbits: PathBuf,
    },
    /// Re-validate records using only the records and their models.
    Verify {
        #[command(flatten)]
        common: Common,
        /// JSON-lines file to check.
        #[arg(long)]
        records: PathBuf,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
    Check,
}

fn load(c: &Common, n_max: Option<usize>) -> Result<(RunConfig, OutDir), Failure> {
    let mut cfg = RunConfig::load(&c.config).map_err(Failure::Usage)?;
    if c.k.is_some() {
        cfg.k = c.k;
    }
    if c.h.is_some() {
        cfg.h = c.h;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if c.out.is_some() {
        cfg.out = c.out.clone();
    }
    if let Some(n) = n_max {
        cfg.minimax.n_max = n;
    }
    cfg.validate().map_err(Failure::Usage)?;
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let out = OutDir::create(&dir).map_err(Failure::Run)?;
    Ok((cfg, out))
}

fn init_workers() -> Result<(), Failure> {
    let Ok(v) = std::env::var("TONELLI_WORKERS") else {
        return Ok(());
    };
    let n: usize = v.parse().map_err(|_| {
        Failure::Usage(anyhow::anyhow!(
            "TONELLI_WORKERS must be a positive integer, got {v:?}"
        ))
    })?;
    if n == 0 {
        return Err(Failure::Usage(anyhow::anyhow!(
            "TONELLI_WORKERS must be positive"
        )));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Run(e.into()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_workers()?;
    let check = |ok: bool| if ok { Ok(()) } else { Err(Failure::Check) };
    match cli.command {
        Command::Orbit(c) => {
            let (cfg, out) = load(&c, None)?;
            commands::orbit(&cfg, &out).map_err(Failure::Run)
        }
        Command::Minimax { common, n_max } => {
            let (cfg, out) = load(&common, n_max)?;
            commands::minimax(&cfg, &out).map_err(Failure::Run)
        }
        Command::Mane { common, verify } => {
            let (cfg, out) = load(&common, None)?;
            check(commands::mane(&cfg, &out, verify).map_err(Failure::Run)?)
        }
        Command::Spectrum { common, orbits } => {
            let (cfg, out) = load(&common, None)?;
            commands::spectrum(&cfg, &out, &orbits).map_err(Failure::Run)
        }
        Command::Verify { common, records } => {
            let (cfg, out) = load(&common, None)?;
            check(commands::verify(&cfg, &out, &records).map_err(Failure::Run)?)
        }
    }
}

fn error_line(kind: &str, e: &anyhow::Error) -> String {
    serde_json::json!({ "kind": "error", "error": { "type": kind, "message": format!("{e:#}") } })
        .to_string()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            println!("{}", error_line("usage", &e));
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            println!("{}", error_line("runtime", &e));
            ExitCode::from(1)
        }
        Err(Failure::Check) => ExitCode::from(3),
    }
}
