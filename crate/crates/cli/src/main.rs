use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use itl_core::harness::{self, Experiment, HarnessError, Preset, RunConfig, DATA_ROOT_ENV};

#[derive(Parser)]
#[command(name = "itl", version, about = "In-the-loop training of spiking networks on an emulated analog substrate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model for every configured seed.
    Train(Args),
    /// Evaluate the checkpoint named in the configuration.
    Eval(Args),
    /// Run the sweep selected by `experiment` in the configuration.
    Sweep(Args),
}

#[derive(clap::Args)]
#[command(after_help = format!("The data root can be overridden with {DATA_ROOT_ENV}."))]
struct Args {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replace the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base preset the configuration is layered on.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

fn prepare(args: &Args, forced: Option<Experiment>) -> Result<RunConfig, HarnessError> {
    let preset = args.preset.map(|p| match p {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    });
    let mut cfg = RunConfig::load(&args.config, preset)?;
    match forced {
        Some(e) => cfg.experiment = e,
        None if !cfg.experiment.is_sweep() => {
            return Err(HarnessError::Config(format!(
                "`sweep` needs a sweep experiment, the configuration selects `{}`",
                cfg.experiment.name()
            )))
        }
        None => {}
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (args, forced) = match &cli.command {
        Command::Train(a) => (a, Some(Experiment::Train)),
        Command::Eval(a) => (a, Some(Experiment::Eval)),
        Command::Sweep(a) => (a, None),
    };
    let result = prepare(args, forced).and_then(|cfg| harness::run(&cfg));
    match result {
        Ok(outcome) => {
            eprintln!("results written to {}", outcome.dir.display());
            match outcome.failure {
                None => ExitCode::SUCCESS,
                Some(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
