use std::path::PathBuf;

use clap::Parser;
use rayon::prelude::*;

use panst_core::panoptic::{fuse_panoptic, FusionConfig};
use panst_core::write_tensor;

use crate::io::{load_prediction, mct_stems, segments_path, with_jobs, CliError, CliResult};

#[derive(Parser)]
pub struct Args {
    /// Mask logits tensor (N x H x W), or a directory of them
    #[arg(long)]
    pub pred: PathBuf,
    /// Class logits tensor (N x (C+1)), or the matching directory
    #[arg(long)]
    pub classes: PathBuf,
    /// Output id map (H x W u32), or an output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Output segment table (.segments.jsonl), or its directory
    #[arg(long)]
    pub segments: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub class_thresh: f32,
    #[arg(long, default_value_t = 0.8)]
    pub overlap_thresh: f32,
    #[arg(long, default_value_t = 0)]
    pub min_area: u64,
    /// Images processed in parallel (directory mode)
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

fn fuse_one(
    pred: &PathBuf,
    classes: &PathBuf,
    out: &PathBuf,
    segments: &PathBuf,
    cfg: &FusionConfig,
) -> CliResult<()> {
    let prediction = load_prediction(pred, classes)?;
    let pan = fuse_panoptic(&prediction, cfg)?;
    write_tensor(out, &pan.id_map)?;
    pan.table.write_jsonl(segments)?;
    Ok(())
}

pub fn run(args: Args) -> CliResult<()> {
    let cfg = FusionConfig {
        class_threshold: args.class_thresh,
        overlap_threshold: args.overlap_thresh,
        min_area: args.min_area,
    };
    cfg.validate()?;

    if !args.pred.is_dir() {
        return fuse_one(&args.pred, &args.classes, &args.out, &args.segments, &cfg);
    }

    // directory mode: fuse every <stem>.mct against <stem>.mct class
    // logits, writing <stem>.mct maps and <stem>.segments.jsonl tables
    for dir in [&args.classes, &args.out, &args.segments] {
        if !dir.is_dir() {
            return Err(CliError::validation(format!(
                "{} must be a directory when --pred is one",
                dir.display()
            )));
        }
    }
    let stems = mct_stems(&args.pred)?;
    if stems.is_empty() {
        return Err(CliError::validation(format!(
            "no .mct files in {}",
            args.pred.display()
        )));
    }
    with_jobs(args.jobs, || {
        stems.par_iter().try_for_each(|stem| {
            let name = format!("{stem}.mct");
            fuse_one(
                &args.pred.join(&name),
                &args.classes.join(&name),
                &args.out.join(&name),
                &segments_path(&args.segments, stem),
                &cfg,
            )
        })
    })?
}
