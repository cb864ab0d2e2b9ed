use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

use commands::CliError;

#[derive(Parser)]
#[command(name = "mixer", version, about = "Image-query to multi-modal entity retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, organize it into categories and write judgments.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the curriculum on a generated corpus, checkpointing at phase boundaries.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a phase-boundary checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out split of a corpus.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Judgments file; defaults to the one in the data directory.
        #[arg(long)]
        judgments: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every configured variant and sample cap over the study seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every parameter group.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test hook: perturb the analytic gradient of one group.
        #[arg(long, hide = true)]
        corrupt_group: Option<String>,
    },
}

fn load_config(path: Option<&Path>) -> Result<mixer_core::config::RunConfig, CliError> {
    match path {
        Some(p) => Ok(mixer_core::config::RunConfig::load(p)?),
        None => Ok(mixer_core::config::RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out } => commands::gen_data(&load_config(config.as_deref())?, &out),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => commands::train(&load_config(config.as_deref())?, &data, &out, resume.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            data,
            judgments,
            out,
        } => commands::eval(&load_config(config.as_deref())?, &checkpoint, &data, judgments.as_deref(), &out),
        Command::Ablate { config, out } => commands::ablate(&load_config(config.as_deref())?, &out),
        Command::GradCheck {
            config,
            out,
            corrupt_group,
        } => commands::grad_check(&load_config(config.as_deref())?, out.as_deref(), corrupt_group.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
