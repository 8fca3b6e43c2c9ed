use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ppmix_cli::manifest::Manifest;
use ppmix_cli::{load_config, run_experiment, Command, Overrides};

#[derive(Parser)]
#[command(name = "ppmix", version, about = "DP mixture models for marked Poisson processes")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a simulated pattern.
    Simulate(RunArgs),
    /// Run MCMC, then curves and diagnostics.
    Fit(RunArgs),
    /// Curves from an existing chain in the output directory.
    Functionals(RunArgs),
    /// Q-Q diagnostics from an existing chain in the output directory.
    Diagnose(RunArgs),
    /// Check output files against their manifest hashes.
    Verify {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file, or a bundled preset: sim51, coal-direct, coal-transformed, pines.
    #[arg(long)]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Fit(a) => (Command::Fit, a),
        Cmd::Functionals(a) => (Command::Functionals, a),
        Cmd::Diagnose(a) => (Command::Diagnose, a),
        Cmd::Verify { out } => return verify(&out),
    };
    let (mut cfg, base) = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    cfg.apply(&Overrides {
        command: Some(command),
        seed: args.seed,
        iterations: args.iters,
        burn_in: args.burnin,
        thin: args.thin,
        chains: args.chains,
        output: args.out,
    });
    match run_experiment(&cfg, &base) {
        Ok(report) => {
            println!("{}: wrote {} files to {}", command.name(), report.files.len(), report.output.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn verify(out: &std::path::Path) -> ExitCode {
    match Manifest::read(out) {
        Ok(m) => {
            let bad = m.verify(out);
            if bad.is_empty() {
                println!("{} outputs match the manifest", m.outputs.len());
                ExitCode::SUCCESS
            } else {
                bad.iter().for_each(|b| eprintln!("mismatch: {b}"));
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
