use std::path::PathBuf;

use clap::Parser;

use panst_core::confidence::AffinityMap;
use panst_core::loss::sample_points;
use panst_core::rng::{stream, STAGE_CLI_POINTS};
use panst_core::{read_tensor, Tensor};

use crate::io::{write_json, CliResult};

#[derive(Parser)]
pub struct Args {
    /// Sampling-affinity map (H x W, -inf marks filtered cells)
    #[arg(long)]
    pub affinity: PathBuf,
    /// Points to select
    #[arg(long, default_value_t = 112 * 112)]
    pub np: usize,
    /// Fraction taken by descending affinity; the rest is uniform
    #[arg(long, default_value_t = 0.75)]
    pub beta: f64,
    #[arg(long)]
    pub seed: u64,
    /// Output point list (JSON)
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: Args) -> CliResult<()> {
    let values: Tensor<f32> = read_tensor(&args.affinity)?;
    let affinity = AffinityMap { values };
    let mut rng = stream(args.seed, STAGE_CLI_POINTS, 0);
    let points = sample_points(&affinity, args.np, args.beta, &mut rng)?;
    write_json(&args.out, &points)
}
