use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod error;
mod evaluate;
mod metrics;

use error::CliError;

/// Synthetic video data, trajectory-clustering training, and dense evaluation.
///
/// Any `--key=value` argument that is not one of the flags below overrides
/// the matching key of the config file.
#[derive(Debug, Parser)]
#[command(name = "mosic", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the encoder, writing a checkpoint per epoch and metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; only `epochs` may be overridden.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Record elapsed seconds in metrics.csv instead of 0.
        #[arg(long)]
        walltime: bool,
    },
    /// Evaluate a checkpoint or external features; writes report.csv and cluster maps.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "features", required_unless_present = "features")]
        checkpoint: Option<PathBuf>,
        /// Manifest of `clip_id = file.mgt1` feature dumps shaped `[T, rows, cols, d]`.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check of the analytic gradients.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Print the header and value statistics of an MGT1, TRK1 or MCK1 file.
    Inspect { file: PathBuf },
    /// Validate an external TRK1 track file, optionally installing it into a clip.
    TracksImport {
        file: PathBuf,
        /// Clip directory to copy the tracks into.
        #[arg(long)]
        into: Option<PathBuf>,
    },
}

const FLAGS: [&str; 11] = [
    "config",
    "out",
    "data",
    "resume",
    "force",
    "walltime",
    "checkpoint",
    "features",
    "into",
    "help",
    "version",
];

/// Pull `--key=value` overrides for config keys out of the argument list.
fn split_overrides(args: Vec<OsString>) -> (Vec<OsString>, Vec<(String, String)>) {
    let mut kept = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for arg in args {
        if let Some((key, value)) = arg
            .to_str()
            .and_then(|s| s.strip_prefix("--"))
            .and_then(|s| s.split_once('='))
        {
            if !FLAGS.contains(&key) {
                overrides.push((key.to_string(), value.to_string()));
                continue;
            }
        }
        kept.push(arg);
    }
    (kept, overrides)
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), CliError> {
    let load = |common: &Common| commands::load_config(common.config.as_deref(), &overrides);
    match cli.command {
        Command::GenData { common, out, force } => commands::gen_data(load(&common)?, &out, force),
        Command::Train {
            common,
            data,
            out,
            resume,
            force,
            walltime,
        } => {
            let opts = commands::TrainOpts {
                data,
                out,
                resume,
                force,
                walltime,
            };
            commands::train(load(&common)?, &opts)
        }
        Command::Eval {
            common,
            data,
            out,
            checkpoint,
            features,
            force,
        } => {
            let source = match (checkpoint, features) {
                (Some(c), _) => evaluate::Source::Checkpoint(c),
                (None, Some(f)) => evaluate::Source::Features(f),
                (None, None) => unreachable!("clap requires one source"),
            };
            evaluate::eval(load(&common)?, &data, &out, &source, force)
        }
        Command::GradCheck { common } => commands::grad_check(load(&common)?),
        Command::Inspect { file } => commands::inspect(&file),
        Command::TracksImport { file, into } => commands::tracks_import(&file, into.as_deref()),
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args_os().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_split_from_flags() {
        let args: Vec<OsString> = ["mosic", "train", "--data=d", "--out", "o", "--lr_head=0.1", "--force"]
            .iter()
            .map(OsString::from)
            .collect();
        let (kept, ov) = split_overrides(args);
        assert_eq!(
            kept,
            ["mosic", "train", "--data=d", "--out", "o", "--force"].map(OsString::from)
        );
        assert_eq!(ov, vec![("lr_head".to_string(), "0.1".to_string())]);
    }
}
