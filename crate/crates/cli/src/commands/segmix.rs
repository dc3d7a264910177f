use std::path::PathBuf;

use clap::Parser;

use panst_core::rng::{stream, STAGE_SEGMIX};
use panst_core::segmix::{segmix, LabeledImage};
use panst_core::{read_tensor, write_tensor, Tensor};

use crate::io::{load_panoptic, CliResult};

#[derive(Parser)]
pub struct Args {
    /// Source image tensor (Ch x H x W)
    #[arg(long)]
    pub source_image: PathBuf,
    /// Source panoptic id map
    #[arg(long)]
    pub source_map: PathBuf,
    /// Source segment table
    #[arg(long)]
    pub source_segments: PathBuf,
    /// Target image tensor (Ch x H x W)
    #[arg(long)]
    pub target_image: PathBuf,
    /// Target panoptic id map
    #[arg(long)]
    pub target_map: PathBuf,
    /// Target segment table
    #[arg(long)]
    pub target_segments: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_image: PathBuf,
    #[arg(long)]
    pub out_map: PathBuf,
    #[arg(long)]
    pub out_segments: PathBuf,
}

fn load_scene(image: &PathBuf, map: &PathBuf, segments: &PathBuf) -> CliResult<LabeledImage> {
    let image: Tensor<f32> = read_tensor(image)?;
    let pan = load_panoptic(map, segments)?;
    Ok(LabeledImage::from_panoptic(image, pan)?)
}

pub fn run(args: Args) -> CliResult<()> {
    let source = load_scene(&args.source_image, &args.source_map, &args.source_segments)?;
    let target = load_scene(&args.target_image, &args.target_map, &args.target_segments)?;
    let mut rng = stream(args.seed, STAGE_SEGMIX, 0);
    let mixed = segmix(&source, &target, &mut rng)?;
    write_tensor(&args.out_image, &mixed.image)?;
    write_tensor(&args.out_map, &mixed.panoptic.id_map)?;
    mixed.panoptic.table.write_jsonl(&args.out_segments)?;
    Ok(())
}
