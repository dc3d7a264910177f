use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use serde::Serialize;

use panst_core::confidence::{
    image_lambda, per_mask_confidence, sampling_affinity, AffinityMap, ConfidenceBundle,
    Thresholds,
};
use panst_core::loss::{target_loss, LossReport, LossWeights, TargetLossConfig};
use panst_core::panoptic::{
    fuse_with_confidence, pixel_confidence, to_pseudolabel, FusionConfig, MaskPrediction,
};
use panst_core::Tensor;

use crate::io::{load_prediction, write_json, CliResult};

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scaling {
    /// Per-mask factors from foreground confidence counts
    Mls,
    /// One image-wide factor for every mask
    Ils,
    /// No scaling (baseline consistency)
    None,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Filter {
    /// Filter by the max-over-masks teacher confidence map
    AllMasks,
    /// Filter each mask by its own sigmoid confidence
    PerMask,
    /// No filtering: sample by student uncertainty alone
    None,
}

#[derive(Parser)]
pub struct Args {
    /// Student mask logits (N x H x W)
    #[arg(long)]
    pub student_masks: PathBuf,
    /// Student class logits (N x (C+1))
    #[arg(long)]
    pub student_classes: PathBuf,
    /// Teacher mask logits (N x H x W)
    #[arg(long)]
    pub teacher_masks: PathBuf,
    /// Teacher class logits (N x (C+1))
    #[arg(long)]
    pub teacher_classes: PathBuf,
    #[arg(long, default_value_t = 0.99)]
    pub tau1: f32,
    #[arg(long, default_value_t = 0.8)]
    pub tau2: f32,
    #[arg(long, default_value_t = 112 * 112)]
    pub np: usize,
    #[arg(long, default_value_t = 0.75)]
    pub beta: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Scaling::Mls)]
    pub scaling: Scaling,
    #[arg(long, value_enum, default_value_t = Filter::AllMasks)]
    pub filter: Filter,
    #[arg(long, default_value_t = 0.8)]
    pub class_thresh: f32,
    #[arg(long, default_value_t = 0.8)]
    pub overlap_thresh: f32,
    #[arg(long, default_value_t = 0)]
    pub min_area: u64,
    #[arg(long)]
    pub json_report: PathBuf,
}

#[derive(Serialize)]
struct FullReport {
    seed: u64,
    n_teacher_segments: usize,
    lambda: Vec<f64>,
    #[serde(flatten)]
    loss: LossReport,
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

    let student = load_prediction(&args.student_masks, &args.student_classes)?;
    let teacher = load_prediction(&args.teacher_masks, &args.teacher_classes)?;

    // teacher side: fuse, hard labels, confidence bundle
    let rho = pixel_confidence(&teacher);
    let pan = fuse_with_confidence(&teacher, &rho, &fusion)?;
    let bundle = ConfidenceBundle::compute(rho, &pan, &thresholds)?;
    let labels = to_pseudolabel(&pan);

    let lambdas: Vec<f32> = match args.scaling {
        Scaling::Mls => bundle.lambda.clone(),
        Scaling::Ils => {
            let ils = image_lambda(&bundle.phi, thresholds.tau_ils)?;
            vec![ils; labels.len()]
        }
        Scaling::None => vec![1.0; labels.len()],
    };

    let affinities = build_affinities(&student, &teacher, &bundle.phi, args.filter, args.tau2)?;

    let cfg = TargetLossConfig {
        weights: LossWeights::default(),
        n_points: args.np,
        beta: args.beta,
        seed: args.seed,
    };
    let loss = target_loss(&student, &labels, &lambdas, &affinities, &cfg)?;
    write_json(
        &args.json_report,
        &FullReport {
            seed: args.seed,
            n_teacher_segments: labels.len(),
            lambda: lambdas.iter().map(|&v| v as f64).collect(),
            loss,
        },
    )
}

fn build_affinities(
    student: &MaskPrediction,
    teacher: &MaskPrediction,
    phi: &Tensor<f32>,
    filter: Filter,
    tau2: f32,
) -> CliResult<Vec<AffinityMap>> {
    let h = student.height();
    let w = student.width();
    (0..student.num_masks())
        .map(|i| {
            let plane = Tensor::new(vec![h, w], student.mask_logit_slab(i).to_vec())?;
            let map = match filter {
                Filter::AllMasks => sampling_affinity(&plane, phi, tau2)?,
                Filter::PerMask => {
                    let teacher_plane =
                        Tensor::new(vec![h, w], teacher.mask_logit_slab(i).to_vec())?;
                    let conf = per_mask_confidence(&teacher_plane)?;
                    sampling_affinity(&plane, &conf, tau2)?
                }
                Filter::None => AffinityMap::unfiltered(&plane)?,
            };
            Ok(map)
        })
        .collect()
}
