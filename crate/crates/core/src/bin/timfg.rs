use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use timfg::commands::{run, Command, RunStatus};
use timfg::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "timfg", version, about = "Regularized equilibria of time-inconsistent mean field games")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Run policy iteration at one entropy weight.
    Pia,
    /// Run the vanishing-entropy schedule with warm starts.
    Vanish,
    /// Solve, then compute residuals, consistency gaps, deviation gains and lemma checks.
    Verify,
    /// Solve, then compare Monte Carlo value estimates with the PDE.
    McCheck,
    /// Run the built-in special-case checks.
    Selftest,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "TIMFG_THREADS")]
    threads: Option<usize>,
    /// Catalog model name.
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    horizon: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    n_time: Option<usize>,
    #[arg(long, global = true)]
    n_space: Option<usize>,
    #[arg(long, global = true)]
    n_action: Option<usize>,
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    /// Exit successfully even when an iteration cap is hit.
    #[arg(long, global = true)]
    allow_nonconverged: bool,
    #[arg(long, global = true)]
    lambda0: Option<f64>,
    #[arg(long, global = true)]
    halvings: Option<usize>,
    #[arg(long, global = true)]
    n_particles: Option<usize>,
    #[arg(long, global = true)]
    n_paths: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        set(&mut cfg.mc.seed, &self.seed);
        set(&mut cfg.model.name, &self.model);
        set(&mut cfg.model.horizon, &self.horizon);
        set(&mut cfg.solver.lambda, &self.lambda);
        set(&mut cfg.grid.n_time, &self.n_time);
        set(&mut cfg.grid.n_space, &self.n_space);
        set(&mut cfg.grid.n_action, &self.n_action);
        set(&mut cfg.solver.tol, &self.tol);
        set(&mut cfg.solver.max_iters, &self.max_iters);
        set(&mut cfg.vanish.lambda0, &self.lambda0);
        set(&mut cfg.vanish.halvings, &self.halvings);
        set(&mut cfg.mc.n_particles, &self.n_particles);
        set(&mut cfg.mc.n_paths, &self.n_paths);
        if self.allow_nonconverged {
            cfg.solver.allow_nonconverged = true;
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match &cli.overrides.config {
        Some(path) => match RunConfig::load(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    let command = match cli.command {
        Cmd::Pia => Command::Pia,
        Cmd::Vanish => Command::Vanish,
        Cmd::Verify => Command::Verify,
        Cmd::McCheck => Command::McCheck,
        Cmd::Selftest => Command::Selftest,
    };
    match run(command, &cfg) {
        Ok(RunStatus::Ok) => ExitCode::SUCCESS,
        Ok(RunStatus::NotConverged) => {
            eprintln!("error: policy iteration did not converge (use --allow-nonconverged to accept)");
            ExitCode::from(3)
        }
        Ok(RunStatus::SelfTestFailed) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
