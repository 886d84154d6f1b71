//! `initforge` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use initforge_cli::commands::{self, GenKind};
use initforge_cli::config::{Config, Profile};
use initforge_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "initforge", version, about = "Generative models of network weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file merged over the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the profile named in the config file.
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base-network population and build the Weight-Dataset.
    Harvest {
        #[command(flatten)]
        common: Common,
    },
    /// Train a weight generator.
    TrainGen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: GenKind,
        /// Directory holding the Weight-Dataset (defaults to --out).
        #[arg(long)]
        inputs: Option<PathBuf>,
    },
    /// Write one initial weight set.
    Init {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        arch: String,
        #[arg(long)]
        method: String,
        /// Directory holding trained generators (defaults to --out).
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Run one evaluation experiment.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        experiment: String,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Summarise the evaluation results found in --out.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load(c: &Common) -> CliResult<Config> {
    Config::load(c.config.as_deref(), c.profile)
}

fn run(cmd: Command) -> CliResult<()> {
    let m = match cmd {
        Command::Harvest { common: c } => commands::harvest(&load(&c)?, c.seed, &c.out)?,
        Command::TrainGen { common: c, kind, inputs } => {
            let inputs = commands::models_dir(inputs, &c.out);
            commands::train_gen(&load(&c)?, kind, c.seed, &inputs, &c.out)?
        }
        Command::Init { common: c, arch, method, models } => {
            if !initforge_cli::config::METHODS.contains(&method.as_str()) {
                return Err(CliError::Config(format!("unknown method `{method}`")));
            }
            let models = commands::models_dir(models, &c.out);
            commands::init(&load(&c)?, &arch, &method, c.seed, &models, &c.out)?
        }
        Command::Evaluate { common: c, experiment, models } => {
            if !initforge_cli::experiments::EXPERIMENTS.contains(&experiment.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown experiment `{experiment}` (expected one of {:?})",
                    initforge_cli::experiments::EXPERIMENTS
                )));
            }
            let models = commands::models_dir(models, &c.out);
            commands::evaluate(&load(&c)?, &experiment, c.seed, &models, &c.out)?
        }
        Command::Report { common: c } => commands::report(&load(&c)?, c.seed, &c.out)?,
    };
    eprintln!(
        "[initforge] {} done in {:.1}s, {} outputs",
        m.command,
        m.wall_clock_secs,
        m.outputs.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("initforge: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
