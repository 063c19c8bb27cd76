//! `dsdlab`: generate synthetic corpora, train with hybrid likelihood and
//! divergence schedules, evaluate decodes, and probe the gradient and
//! controller machinery from the command line.
//!
//! Exit codes: 0 success, 1 invalid input or config, 2 runtime failure
//! (numeric abort, I/O), 3 gradient check failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dsdlab", version, about = "Sequence training laboratory for skew divergence losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus (train/dev/test TSVs plus a vocab file)
    Generate {
        /// Run configuration (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Destination directory (defaults to data_dir from the config)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model through the configured phase schedule
    Train {
        /// Run configuration (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Run directory (defaults to out_dir from the config)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the newest checkpoint in the run directory
        #[arg(long)]
        resume: bool,
        /// Train once per fixed mixing weight in {0, 0.5, 1} and rank them
        #[arg(long = "beta-sweep")]
        beta_sweep: bool,
    },
    /// Decode the test set from a trained checkpoint and report BLEU
    Eval {
        /// Run configuration (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Run directory holding the checkpoint (defaults to out_dir)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Beam width; repeat the flag to decode at several widths
        #[arg(long)]
        beam: Vec<usize>,
        /// Decode at widths 1, 3, 5, 25, 100 and tabulate BLEU per width
        #[arg(long = "beam-sweep")]
        beam_sweep: bool,
        /// Decode file to compare against with a paired sign test
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Check every loss gradient and the full model path against finite differences
    Gradcheck {
        /// Random loss batteries per loss variant
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Replay recorded divergence readings through the mixing-weight controller
    ControllerSim {
        /// Run configuration (JSON); defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Text file with one divergence reading per line
        #[arg(long)]
        input: PathBuf,
        /// Directory for controller-sim.csv (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Generate { config, out } => {
            commands::cmd_generate(&config, out.as_deref()).map(|_| 0)
        }
        Command::Train { config, out, seed, resume, beta_sweep } => {
            let flags = commands::TrainFlags { out, seed, resume, beta_sweep };
            commands::cmd_train(&config, &flags).map(|_| 0)
        }
        Command::Eval { config, out, beam, beam_sweep, baseline } => {
            let flags = commands::EvalFlags { out, beams: beam, beam_sweep, baseline };
            commands::cmd_eval(&config, &flags).map(|_| 0)
        }
        Command::Gradcheck { trials, seed } => commands::cmd_gradcheck(trials, seed),
        Command::ControllerSim { config, input, out } => {
            commands::cmd_controller_sim(config.as_deref(), &input, out.as_deref()).map(|_| 0)
        }
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
