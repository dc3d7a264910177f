//! `panst` — panoptic self-training pipeline stages as subcommands.
//!
//! Every randomized stage takes a mandatory `--seed` and derives its
//! internal streams from it, so reruns are byte-identical. All numeric
//! logic lives in the library; this binary only wires files to calls.

mod commands;
mod io;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::{confidence, evaluate, loss, pseudolabel, sample_points, segmix, simulate};

#[derive(Parser)]
#[command(
    name = "panst",
    version,
    about = "Confidence machinery for panoptic self-training",
    long_about = None
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse a mask prediction into a panoptic map and segment table
    Pseudolabel(pseudolabel::Args),
    /// Teacher confidence: phi map and per-segment lambda factors
    Confidence(confidence::Args),
    /// Draw filtered points from a sampling-affinity map
    SamplePoints(sample_points::Args),
    /// Self-training loss of a student against teacher pseudo-labels
    Loss(loss::Args),
    /// Paste half of a source scene's segments onto a target scene
    Segmix(segmix::Args),
    /// PQ/SQ/RQ of predicted panoptic maps against ground truth
    Evaluate(evaluate::Args),
    /// Run the desk-scale self-training simulator
    Simulate(simulate::Args),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            std::process::exit(0);
        }
        Err(e) => {
            eprint!("{e}");
            std::process::exit(1);
        }
    };

    let result = match cli.command {
        Command::Pseudolabel(args) => pseudolabel::run(args),
        Command::Confidence(args) => confidence::run(args),
        Command::SamplePoints(args) => sample_points::run(args),
        Command::Loss(args) => loss::run(args),
        Command::Segmix(args) => segmix::run(args),
        Command::Evaluate(args) => evaluate::run(args),
        Command::Simulate(args) => simulate::run(args),
    };

    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
