use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use squisher_lab::commands::{self, Command};
use squisher_lab::config::Overrides;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Train,
    Fisher,
    Merge,
    Prune,
    Mask,
    Embed,
    Ewc,
    Ablate,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Train => Command::Train,
            Cmd::Fisher => Command::Fisher,
            Cmd::Merge => Command::Merge,
            Cmd::Prune => Command::Prune,
            Cmd::Mask => Command::Mask,
            Cmd::Embed => Command::Embed,
            Cmd::Ewc => Command::Ewc,
            Cmd::Ablate => Command::Ablate,
        }
    }
}

/// Fisher-diagonal estimators and their applications, driven by TOML configs.
#[derive(Debug, Parser)]
#[command(name = "squisher-lab", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set train.hyper.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let ov = Overrides { set: cli.set, seed: cli.seed, out: cli.out };
    match commands::run(cli.command.into(), &cli.config, &ov) {
        Ok(summary) => {
            println!("{} rows, manifest {}", summary.rows.len(), summary.manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("squisher-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
