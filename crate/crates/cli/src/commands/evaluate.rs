use std::path::PathBuf;

use clap::Parser;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use panst_core::pq::{pq_accumulate, pq_finalize, PqReport, PqStats};

use crate::io::{load_panoptic, mct_stems, read_json, segments_path, with_jobs, CliError, CliResult};

#[derive(Parser)]
pub struct Args {
    /// Directory of predicted id maps (.mct) and segment tables
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Directory of ground-truth id maps and segment tables
    #[arg(long)]
    pub gt_dir: PathBuf,
    /// Class taxonomy (JSON: {"classes": [{"id": 1, "name": "road"}, ...]})
    #[arg(long)]
    pub classes: PathBuf,
    /// Output metrics (JSON)
    #[arg(long)]
    pub out: PathBuf,
    /// Images processed in parallel
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Serialize, Deserialize)]
pub struct Taxonomy {
    pub classes: Vec<TaxonomyClass>,
}

#[derive(Serialize, Deserialize)]
pub struct TaxonomyClass {
    pub id: u32,
    pub name: String,
}

#[derive(Serialize)]
struct EvalReport {
    n_images: usize,
    classes: Vec<TaxonomyClass>,
    #[serde(flatten)]
    report: PqReport,
}

pub fn run(args: Args) -> CliResult<()> {
    let taxonomy: Taxonomy = read_json(&args.classes)?;
    if taxonomy.classes.is_empty() {
        return Err(CliError::validation("taxonomy lists no classes"));
    }
    let stems = mct_stems(&args.gt_dir)?;
    if stems.is_empty() {
        return Err(CliError::validation(format!(
            "no .mct files in {}",
            args.gt_dir.display()
        )));
    }

    // per-image stats accumulate into a commutative sum
    let stats = with_jobs(args.jobs, || -> CliResult<PqStats> {
        stems
            .par_iter()
            .map(|stem| -> CliResult<PqStats> {
                let name = format!("{stem}.mct");
                let pred = load_panoptic(
                    &args.pred_dir.join(&name),
                    &segments_path(&args.pred_dir, stem),
                )?;
                let gt =
                    load_panoptic(&args.gt_dir.join(&name), &segments_path(&args.gt_dir, stem))?;
                let mut stats = PqStats::default();
                pq_accumulate(&pred, &gt, &mut stats)?;
                Ok(stats)
            })
            .try_reduce(PqStats::default, |mut acc, s| {
                acc.merge(&s);
                Ok(acc)
            })
    })??;

    let subset: Vec<u32> = taxonomy.classes.iter().map(|c| c.id).collect();
    let report = pq_finalize(&stats, &subset)?;
    crate::io::write_json(
        &args.out,
        &EvalReport {
            n_images: stems.len(),
            classes: taxonomy.classes,
            report,
        },
    )
}
