mod commands;
mod fixtures;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradguard::ErrorCategory;

#[derive(Parser, Debug)]
#[command(
    name = "gradguard",
    version,
    about = "Gradient reconstruction attacks and optimal defenses"
)]
struct Cli {
    /// More progress output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Replace the configured seeds with this one.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Federated training; writes train_log.csv and metrics.csv.
    Train(RunArgs),
    /// Reconstruction attack on the configured batch; writes attack.csv.
    Attack(RunArgs),
    /// Fisher trace and reconstruction bound; writes bound.csv.
    Bound(RunArgs),
    /// Privacy/utility sweep over the defense grid; writes sweep.csv.
    Sweep(RunArgs),
    /// Regenerates the committed fixtures.
    GenFixtures {
        #[arg(long, default_value = "fixtures")]
        out: PathBuf,
    },
}

fn exit_code(c: ErrorCategory) -> u8 {
    match c {
        ErrorCategory::Config => 2,
        ErrorCategory::Numeric => 3,
        ErrorCategory::Io => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("error[config]: cannot start {n} workers: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Attack(a) => commands::attack(&a),
        Command::Bound(a) => commands::bound(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::GenFixtures { out } => commands::gen_fixtures(&out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", cat.as_str());
            ExitCode::from(exit_code(cat))
        }
    }
}
