use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use rtetr::experiment::{run_to_exit_code, Command, RunOptions};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Simulate,
    Invert,
    Control,
    Validate,
    Spectrum,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Simulate => Command::Simulate,
            Cmd::Invert => Command::Invert,
            Cmd::Control => Command::Control,
            Cmd::Validate => Command::Validate,
            Cmd::Spectrum => Command::Spectrum,
        }
    }
}

/// Transport time reversal experiments.
#[derive(Debug, Parser)]
#[command(name = "rtetr", version)]
struct Cli {
    command: Cmd,
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Permit inversion of data synthesized on the inversion grid itself.
    #[arg(long)]
    allow_inverse_crime: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let opts = RunOptions {
        out: cli.out,
        seed: cli.seed,
        allow_inverse_crime: cli.allow_inverse_crime,
    };
    let code = run_to_exit_code(cli.command.into(), &cli.config, &opts);
    ExitCode::from(code as u8)
}
