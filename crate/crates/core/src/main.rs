use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spinalxfer::ingest::DICOM_OUTPUT_SIZE;
use spinalxfer::runner::{cmd_augment_preview, cmd_compare, cmd_evaluate, cmd_ingest, cmd_train, IngestKind};
use spinalxfer::Error;

/// Spinal and traditional classifier heads trained under scratch, transfer
/// learning and transferred initialization protocols.
#[derive(Parser)]
#[command(name = "spinalxfer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every restart of a configuration.
    Train { config: PathBuf },
    /// Score a checkpoint on `train`, `val`, `test` or a data file.
    Evaluate {
        checkpoint: PathBuf,
        dataset: String,
        config: PathBuf,
    },
    /// Run a TL and a TI configuration with both head kinds.
    Compare { config_tl: PathBuf, config_ti: PathBuf },
    /// Convert DICOM or 16-bit PGM files into a three-channel image archive.
    Ingest {
        /// `dicom` or `pgm`.
        kind: IngestKind,
        input: PathBuf,
        output: PathBuf,
        /// Side length of the stored images.
        #[arg(long, default_value_t = DICOM_OUTPUT_SIZE)]
        size: usize,
    },
    /// Write augmented training samples as PPM images.
    AugmentPreview { config: PathBuf, n: usize, dir: PathBuf },
}

fn run(cli: Cli) -> Result<String, Error> {
    match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Evaluate {
            checkpoint,
            dataset,
            config,
        } => cmd_evaluate(&checkpoint, &dataset, &config),
        Command::Compare { config_tl, config_ti } => cmd_compare(&config_tl, &config_ti),
        Command::Ingest {
            kind,
            input,
            output,
            size,
        } => cmd_ingest(kind, &input, &output, size),
        Command::AugmentPreview { config, n, dir } => cmd_augment_preview(&config, n, &dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code())
        }
    }
}
