use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mpnqs_runner::config::ExperimentConfig;
use mpnqs_runner::run::{self, RunOptions};
use mpnqs_runner::{exit, exit_code};

#[derive(Parser, Debug)]
#[command(name = "mpnqs", version, about = "Neural backflow VMC and fixed-node DMC for the 3D electron gas")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimize the wavefunction with SR, then measure energy, g(r) and S(k).
    Vmc(Common),
    /// Optimize a Slater-Jastrow trial state and run fixed-node DMC.
    Dmc(Common),
    /// Parse the configuration and print it with defaults filled in.
    Validate(Common),
    /// Measure observables from a checkpoint without optimizing.
    Measure(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, env = "MPNQS_CONFIG")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, env = "MPNQS_SEED")]
    seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long, env = "MPNQS_THREADS")]
    threads: Option<usize>,
    /// Checkpoint directory to continue from.
    #[arg(long, env = "MPNQS_RESUME")]
    resume: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long, env = "MPNQS_OUTPUT")]
    output: Option<PathBuf>,
    /// Use a checkpoint even if its configuration hash differs.
    #[arg(long, env = "MPNQS_FORCE")]
    force: bool,
}

fn run(cli: Cli) -> Result<()> {
    let (Command::Vmc(c) | Command::Dmc(c) | Command::Validate(c) | Command::Measure(c)) = &cli.command;
    if let Some(t) = c.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global()?;
    }
    let mut cfg = ExperimentConfig::load(&c.config)?;
    let opts = RunOptions {
        seed: c.seed,
        output: c.output.clone(),
        resume: c.resume.clone(),
        force: c.force,
    };
    opts.apply(&mut cfg);
    match &cli.command {
        Command::Validate(_) => {
            let (eta, fallback) = cfg.learning_rate();
            if fallback {
                log::warn!("r_s = {} is not tabulated; using the nearest tabulated learning rate", cfg.system.r_s);
            }
            print!("{}", cfg.to_toml());
            println!("# effective learning rate: {eta}");
            println!("# config hash: {}", cfg.hash());
        }
        Command::Vmc(_) => {
            let s = run::run_vmc(&cfg, &opts)?;
            println!("E/N = {:.6} ± {:.6} Ha", s.measurement.energy.mean, s.measurement.energy.error);
        }
        Command::Dmc(_) => {
            let s = run::run_dmc(&cfg, &opts)?;
            println!(
                "DMC E/N: mixed {:.6} ± {:.6} Ha, growth {:.6} ± {:.6} Ha",
                s.estimate.mixed.mean, s.estimate.mixed.error, s.estimate.growth.mean, s.estimate.growth.error
            );
        }
        Command::Measure(_) => {
            let m = run::run_measure(&cfg, &opts)?;
            println!("E/N = {:.6} ± {:.6} Ha", m.energy.mean, m.energy.error);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
