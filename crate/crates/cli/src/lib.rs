//! Command-line runner for `covsde`: figure reproductions, SDE and network
//! ensembles, and the Monte Carlo oracle suite.

pub mod config;
pub mod experiments;
pub mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Command, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "covsde", version, about = "Neural covariance SDE laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Rank collapse of vanilla, Pre-LN and shaped attention; shaped network vs SDE.
    Fig1(RunArgs),
    /// Residual shaped-ReLU networks across a gamma grid vs the resnet SDE.
    Fig2(RunArgs),
    /// Ablations of identity, centering and temperature in shaped attention.
    Fig3(RunArgs),
    /// Stopping times of shaped attention from a large initial covariance.
    Fig4(RunArgs),
    /// Ensemble of covariance SDE paths.
    Sde(RunArgs),
    /// Ensemble of finite-width forward passes.
    Net(RunArgs),
    /// Monte Carlo checks of every closed-form moment; fails on any miss.
    Oracle(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML file with any of the flag names as keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

impl Sub {
    fn split(self) -> (Command, RunArgs) {
        match self {
            Sub::Fig1(a) => (Command::Fig1, a),
            Sub::Fig2(a) => (Command::Fig2, a),
            Sub::Fig3(a) => (Command::Fig3, a),
            Sub::Fig4(a) => (Command::Fig4, a),
            Sub::Sde(a) => (Command::Sde, a),
            Sub::Net(a) => (Command::Net, a),
            Sub::Oracle(a) => (Command::Oracle, a),
        }
    }
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

/// Runs one subcommand, printing a short summary. The exit code is nonzero
/// only when the oracle suite has failures.
pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let (command, args) = cli.command.split();
    let cfg = RunConfig::resolve(command, args.overrides, args.config.as_deref())?;
    match command {
        Command::Fig1 => {
            let r = experiments::run_fig1(&cfg)?;
            for f in &r.finals {
                println!(
                    "{:<18} final mean rho {:.4}  mean |rho| {:.4}  ({} passes)",
                    f.variant, f.mean_rho, f.mean_abs_rho, f.count
                );
            }
            println!("KS(shaped network, SDE) = {:.4}", r.ks);
            print_files(&r.files);
        }
        Command::Fig2 => {
            let r = experiments::run_fig2(&cfg)?;
            for g in &r.rows {
                println!(
                    "gamma {:.4}: p95 |rho| net {:.4} sde {:.4}  KS {:.4}",
                    g.gamma, g.p95_net, g.p95_sde, g.ks
                );
            }
            print_files(&r.files);
        }
        Command::Fig3 => {
            let r = experiments::run_fig3(&cfg)?;
            for i in &r.interventions {
                println!(
                    "{:<22} final mean rho {:.4}  mean |rho| {:.4}  mean |V| {:.4e} (initial {:.4e}, {} overflowed)",
                    i.name, i.final_mean_rho, i.final_mean_abs_rho, i.final_mean_abs_cov, i.initial_mean_abs_cov, i.diverged
                );
            }
            print_files(&r.files);
        }
        Command::Fig4 => {
            let r = experiments::run_fig4(&cfg)?;
            for s in &r.rows {
                println!(
                    "gamma {:.4} {:<4} median t* {:.3}  p10 {:.3}  stopped {}/{}",
                    s.gamma, s.source, s.median, s.p10, s.stopped, s.samples
                );
            }
            print_files(&r.files);
        }
        Command::Sde => print_files(&experiments::run_sde(&cfg)?),
        Command::Net => print_files(&experiments::run_net(&cfg)?),
        Command::Oracle => {
            let r = experiments::run_oracles(&cfg)?;
            let failures = r.failures();
            for c in &failures {
                println!(
                    "FAIL {}: estimate {} ± {}, target {}, z = {:.2}",
                    c.name,
                    c.estimate.mean,
                    c.estimate.std_error,
                    c.target,
                    c.estimate.z_score(c.target)
                );
            }
            println!("{} checks, {} failed", r.checks.len(), failures.len());
            print_files(&r.files);
            if !failures.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
