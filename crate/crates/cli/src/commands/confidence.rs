use std::path::PathBuf;

use clap::Parser;
use serde::Serialize;

use panst_core::confidence::{image_lambda, ConfidenceBundle, Thresholds};
use panst_core::panoptic::{fuse_with_confidence, pixel_confidence, FusionConfig};
use panst_core::{write_tensor, Tensor};

use crate::io::{load_prediction, write_json, CliResult};

#[derive(Parser)]
pub struct Args {
    /// Mask logits tensor (N x H x W)
    #[arg(long)]
    pub pred: PathBuf,
    /// Class logits tensor (N x (C+1))
    #[arg(long)]
    pub classes: PathBuf,
    /// Output teacher confidence map (H x W)
    #[arg(long)]
    pub out_phi: PathBuf,
    /// Output per-segment scaling factors (JSON)
    #[arg(long)]
    pub out_lambda: PathBuf,
    #[arg(long, default_value_t = 0.99)]
    pub tau1: f32,
    #[arg(long, default_value_t = 0.8)]
    pub tau2: f32,
    /// Optional u8 map marking pixels with confidence below tau2
    #[arg(long)]
    pub out_uncertain: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub class_thresh: f32,
    #[arg(long, default_value_t = 0.8)]
    pub overlap_thresh: f32,
    #[arg(long, default_value_t = 0)]
    pub min_area: u64,
}

#[derive(Serialize)]
struct LambdaEntry {
    segment_id: u32,
    class_id: u32,
    mask_index: usize,
    lambda: f32,
}

#[derive(Serialize)]
struct LambdaReport {
    tau1: f32,
    lambda: Vec<LambdaEntry>,
    image_lambda_ils: f32,
    tau_ils: f32,
}

pub fn run(args: Args) -> CliResult<()> {
    let thresholds = Thresholds {
        tau1: args.tau1,
        tau2: args.tau2,
        ..Thresholds::default()
    };
    thresholds.validate()?;
    let fusion = FusionConfig {
        class_threshold: args.class_thresh,
        overlap_threshold: args.overlap_thresh,
        min_area: args.min_area,
    };

    let prediction = load_prediction(&args.pred, &args.classes)?;
    let rho = pixel_confidence(&prediction);
    let pan = fuse_with_confidence(&prediction, &rho, &fusion)?;
    let bundle = ConfidenceBundle::compute(rho, &pan, &thresholds)?;

    write_tensor(&args.out_phi, &bundle.phi)?;
    if let Some(path) = &args.out_uncertain {
        let data: Vec<u8> = bundle
            .phi
            .data()
            .iter()
            .map(|&v| u8::from(v < args.tau2))
            .collect();
        let map = Tensor::new(bundle.phi.shape().to_vec(), data)?;
        write_tensor(path, &map)?;
    }

    let report = LambdaReport {
        tau1: args.tau1,
        lambda: pan
            .table
            .entries
            .iter()
            .zip(&bundle.lambda)
            .map(|(entry, &lambda)| LambdaEntry {
                segment_id: entry.segment_id,
                class_id: entry.class_id,
                mask_index: entry.mask_index,
                lambda,
            })
            .collect(),
        image_lambda_ils: image_lambda(&bundle.phi, thresholds.tau_ils)?,
        tau_ils: thresholds.tau_ils,
    };
    write_json(&args.out_lambda, &report)
}
