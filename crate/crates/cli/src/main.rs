use std::path::PathBuf;
use std::process::ExitCode;

use adacos_cli::{run, Command};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adacos", version, about = "Cosine-softmax loss laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Target-class probability curves, one CSV per curve plus manifest.json.
    Curves { config: PathBuf },
    /// Fixed adaptive scale for a list of class counts.
    ScaleTable { config: PathBuf },
    /// Train on a synthetic task; writes trace.csv, model.json, summary.json.
    Train { config: PathBuf },
    /// Iterations to a held-out accuracy threshold per loss, median over seeds.
    Compare { config: PathBuf },
    /// Open-set verification ROC for a completed training run.
    Eval { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, path) = match cli.command {
        Cmd::Curves { config } => (Command::Curves, config),
        Cmd::ScaleTable { config } => (Command::ScaleTable, config),
        Cmd::Train { config } => (Command::Train, config),
        Cmd::Compare { config } => (Command::Compare, config),
        Cmd::Eval { config } => (Command::Eval, config),
    };
    match run(command, &path) {
        Ok(report) => {
            print!("{report}");
            if !report.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("adacos: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
