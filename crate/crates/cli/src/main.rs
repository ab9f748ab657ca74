use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod manifest;
mod model;
mod protocol;
mod rlcheck;
mod sim;

use manifest::Failure;

#[derive(Parser)]
#[command(
    name = "inflight",
    version,
    about = "Throughput models, simulations, RL checks and the weight-update demo"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Config file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config's seed where it has one.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Analytical throughput model.
    Model {
        #[command(flatten)]
        common: Common,
        /// Best pipeline configuration at the lag cap versus conventional RL.
        #[arg(long)]
        case_study: bool,
        /// Speedup for every cap in the lag grid.
        #[arg(long)]
        speedup_vs_lag: bool,
        /// Throughput and effectiveness of the listed configurations.
        #[arg(long)]
        pareto: bool,
        /// Every feasible (H, I) at the lag cap.
        #[arg(long)]
        search: bool,
    },
    /// Tick-level simulation of conventional or pipelined training.
    Sim {
        #[command(flatten)]
        common: Common,
    },
    /// Off-policy RL math experiments.
    Rlcheck {
        experiment: Experiment,
        #[command(flatten)]
        common: Common,
    },
    /// Run the generation engine until shut down.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Overrides the config's bind address.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Drive a scenario script against a running engine.
    Drive {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:7878")]
        engine: String,
        /// Serve this engine config in-process instead of connecting to
        /// `--engine`.
        #[arg(long)]
        loopback: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Experiment {
    Ess,
    Gradcheck,
    MixedKl,
}

impl Experiment {
    fn name(self) -> &'static str {
        match self {
            Experiment::Ess => "ess",
            Experiment::Gradcheck => "gradcheck",
            Experiment::MixedKl => "mixed-kl",
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Model {
            common,
            case_study,
            speedup_vs_lag,
            pareto,
            search,
        } => model::run(
            &common,
            model::Flags {
                case_study,
                speedup_vs_lag,
                pareto,
                search,
            },
        ),
        Command::Sim { common } => sim::run(&common),
        Command::Rlcheck { experiment, common } => rlcheck::run(experiment, &common),
        Command::Serve { common, bind } => protocol::serve(&common, bind),
        Command::Drive {
            common,
            engine,
            loopback,
        } => protocol::drive(&common, &engine, loopback.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let mut msg = String::new();
            for cause in f.error.chain().map(|c| c.to_string()) {
                // Library errors already embed their source in the message.
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(f.code)
        }
    }
}
