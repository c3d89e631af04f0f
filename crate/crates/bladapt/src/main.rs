use std::path::PathBuf;
use std::process::ExitCode;

use bladapt::{commands, Command, RunConfig};
use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Gen,
    Learn,
    Adapt,
    Test,
    Gradcheck,
    Oracle,
}

#[derive(Debug, Parser)]
#[command(name = "bladapt", version, about = "Bilevel scene-adaptive low-light enhancement")]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// key=value config file; an empty file selects the defaults.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// BL, RBL or naive.
    #[arg(long)]
    mode: Option<String>,
    /// tiny or small.
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    workdir: Option<PathBuf>,
}

fn build(cli: &Cli) -> bladapt::Result<(Command, RunConfig)> {
    let cmd = match cli.command {
        Cmd::Gen => Command::Gen,
        Cmd::Learn => Command::Learn,
        Cmd::Adapt => Command::Adapt,
        Cmd::Test => Command::Test,
        Cmd::Gradcheck => Command::Gradcheck,
        Cmd::Oracle => Command::Oracle,
    };
    let mut cfg = RunConfig::read(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = &cli.mode {
        cfg.set("mode", m)?;
    }
    if let Some(s) = &cli.scale {
        cfg.set("scale", s)?;
    }
    if let Some(w) = &cli.workdir {
        cfg.workdir = w.clone();
    }
    cfg.command = Some(cmd);
    Ok((cmd, cfg))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = build(&cli).and_then(|(cmd, cfg)| commands::run(cmd, &cfg, &mut std::io::stdout()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bladapt: {}", e);
            ExitCode::from(e.exit_code())
        }
    }
}
