use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use outerprod_cli::config::RunConfig;
use outerprod_cli::{emit, exit_code, run, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "outerprod", version, about = "Run derivative verification suites and emit a JSON report")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file (TOML, or JSON by extension). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run independent instances of a suite on all cores.
    #[arg(long, global = true)]
    parallel: bool,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suite to run; repeatable. Replaces the config's checks.
    #[arg(long = "suite", global = true)]
    suites: Vec<String>,
    /// Record wall time per suite (makes reports run-dependent).
    #[arg(long, global = true)]
    timings: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Run the suites listed in the config (or --suite).
    Run,
    VerifyGrad,
    VerifyHess,
    VerifyHessGeneral,
    Quadform,
    Curvature,
    Rank,
    Reg,
    Bound,
    Rnn,
    Conv,
    Rankone,
    StorageReport,
}

impl Command {
    fn suite(self) -> Option<&'static str> {
        Some(match self {
            Command::Run => return None,
            Command::VerifyGrad => "grad",
            Command::VerifyHess => "hess",
            Command::VerifyHessGeneral => "hess-general",
            Command::Quadform => "quadform",
            Command::Curvature => "curvature",
            Command::Rank => "rank",
            Command::Reg => "reg",
            Command::Bound => "bound",
            Command::Rnn => "rnn",
            Command::Conv => "conv",
            Command::Rankone => "rankone",
            Command::StorageReport => "storage",
        })
    }
}

fn execute(cli: &Cli) -> Result<i32, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.command.suite() {
        cfg.checks = vec![s.to_string()];
    } else if !cli.suites.is_empty() {
        cfg.checks = cli.suites.clone();
    }
    let opts = RunOptions {
        parallel: cli.parallel,
        timings: cli.timings,
        probe: None,
    };
    let report = run(&cfg, &opts)?;
    emit(&report, cli.out.as_deref())?;
    Ok(exit_code(&report))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
