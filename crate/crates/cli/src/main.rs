use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(
    name = "trainsim",
    version,
    about = "Partitioning, pipeline and cost experiments driven by one scenario file"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition a model's embedding tables and report load balance.
    Partition {
        #[command(flatten)]
        common: Common,
        /// Also run the exhaustive search (small instances only).
        #[arg(long)]
        oracle: bool,
    },
    /// Run the pipeline simulator and audit exactly-once processing.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Sweep this many consecutive seeds starting at the scenario seed.
        #[arg(long)]
        seeds: Option<u64>,
        /// In a sweep, draw a random fault scenario per seed instead of using
        /// the `sim` section.
        #[arg(long, requires = "seeds")]
        chaos: bool,
    },
    /// Shared input generation service.
    Sig {
        #[command(subcommand)]
        command: SigCommand,
    },
    /// SIG-versus-LIG pipeline cost comparison.
    Cost {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum SigCommand {
    /// Replay the `sig` workload, optionally continuing from saved state.
    Replay {
        #[command(flatten)]
        common: Common,
        /// Cache state to resume from (if present) and save to.
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Evict cache entries matching one predicate from saved state.
    Evict {
        #[arg(long)]
        state: PathBuf,
        #[command(flatten)]
        predicate: Predicate,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Dump service counters.
    Metrics {
        /// Saved state; an empty cache when omitted.
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Predicate {
    /// Entries whose component reads this raw field.
    #[arg(long)]
    raw_field: Option<String>,
    /// Entries consumed by this pipeline.
    #[arg(long)]
    pipeline: Option<String>,
    /// Entries of this component key (hex).
    #[arg(long)]
    key: Option<String>,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    /// Directory for report files; nothing is written when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<trainsim::error::Error> for Failure {
    fn from(e: trainsim::error::Error) -> Self {
        use trainsim::error::Error;
        let code = match e {
            Error::Infeasible { .. } | Error::ConstraintViolation(_) => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn with_path(path: &Path) -> impl Fn(trainsim::error::Error) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Partition { common, oracle } => commands::partition(&common, oracle),
        Command::Simulate { common, seeds, chaos } => commands::simulate(&common, seeds, chaos),
        Command::Sig { command } => match command {
            SigCommand::Replay { common, state } => commands::sig_replay(&common, state.as_deref()),
            SigCommand::Evict {
                state,
                predicate,
                format,
            } => commands::sig_evict(&state, &predicate, format),
            SigCommand::Metrics { state, format } => commands::sig_metrics(state.as_deref(), format),
        },
        Command::Cost { common } => commands::cost(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
