use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ratstab_cli::commands::{self, Status};
use ratstab_cli::config::Overrides;

#[derive(Parser)]
#[command(name = "ratstab", version, about = "Certify, tune and simulate delayed triangular systems with high-gain observers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Output directory (overrides output.directory)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Integration step (overrides sim.h)
    #[arg(long, value_name = "H")]
    step: Option<f64>,
    /// Simulation horizon (overrides sim.T)
    #[arg(long, value_name = "T")]
    horizon: Option<f64>,
    /// Gain scale (overrides gains.theta)
    #[arg(long, value_name = "X")]
    theta: Option<f64>,
    /// Seed for randomized estimates (overrides sim.seed)
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            step: self.step,
            horizon: self.horizon,
            theta: self.theta,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check the stability margins of a configuration and write certificate.json
    Certify {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Relative safety margin used when selecting the functional weight
        #[arg(long, default_value_t = 0.1)]
        alpha_margin: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Find the smallest gain scale satisfying every margin
    Synthesize {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[arg(long, default_value_t = 100.0)]
        theta_max: f64,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Run the configured closed loop and write trajectory.csv
    Simulate {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit exponential and rational decay envelopes to a trajectory column
    Fit {
        /// Trajectory CSV written by `simulate`
        #[arg(long, value_name = "CSV")]
        input: PathBuf,
        #[arg(long, default_value = "norm_x")]
        column: String,
        /// Ignore samples before this time
        #[arg(long, default_value_t = 0.0)]
        from: f64,
    },
    /// Certify and simulate the built-in two-dimensional example
    ReproPaper {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> ratstab_core::Result<Status> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Certify { config, alpha_margin, common } => {
            let r = commands::load(&config, &common.overrides())?;
            commands::cmd_certify(&r, alpha_margin, &mut stdout)
        }
        Command::Synthesize { config, theta_max, tol, common } => {
            let r = commands::load(&config, &common.overrides())?;
            commands::cmd_synthesize(&r, theta_max, tol, &mut stdout)
        }
        Command::Simulate { config, common } => {
            let r = commands::load(&config, &common.overrides())?;
            commands::cmd_simulate(&r, &mut stdout)
        }
        Command::Fit { input, column, from } => commands::cmd_fit(&input, &column, from, &mut stdout),
        Command::ReproPaper { common } => commands::cmd_repro_paper(&common.overrides(), &mut stdout),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Status::InputError.code() as u8 } else { 0 });
        }
    };
    let status = run(cli).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        Status::of_error(&e)
    });
    ExitCode::from(status.code() as u8)
}
