use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wgkv_cli::commands::{cmd_bench, cmd_infer, cmd_oracle, cmd_sweep, cmd_train};
use wgkv_cli::config::{CliConfig, Overrides};
use wgkv_cli::CliError;

#[derive(Parser)]
#[command(
    name = "wgkv",
    version,
    about = "Write-gated KV admission on a CPU toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train gates and write gates.bin and loss.csv
    Train(Common),
    /// Generate from a prompt and write report.json and report.csv
    Infer(Common),
    /// Train per lambda, evaluate per tau and write pareto.csv
    Sweep(Common),
    /// Compare policies and write bench.csv
    Bench(Common),
    /// Run the randomised property suites
    Oracle(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            lambda: self.lambda,
            tau: self.tau,
            window: self.window,
            policy: self.policy.clone(),
            out: self.out.clone(),
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("WGKV_THREADS") else {
        return Ok(());
    };
    let n: usize =
        v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Usage(format!("WGKV_THREADS={v} is not a positive integer"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

type Handler = fn(&CliConfig) -> Result<(), CliError>;

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let (common, cmd): (&Common, Handler) = match &cli.command {
        Command::Train(c) => (c, cmd_train),
        Command::Infer(c) => (c, cmd_infer),
        Command::Sweep(c) => (c, cmd_sweep),
        Command::Bench(c) => (c, cmd_bench),
        Command::Oracle(c) => (c, cmd_oracle),
    };
    let cfg = CliConfig::load(&common.config, &common.overrides())?;
    cmd(&cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wgkv: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
