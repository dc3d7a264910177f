use std::io::Write;
use std::path::PathBuf;

use clap::Parser;
use serde::Serialize;

use panst_core::sim::{simulate, SimConfig, SimReport};

use crate::io::{read_json, write_json, CliError, CliResult};

#[derive(Parser)]
pub struct Args {
    /// Simulator configuration (JSON; missing fields take defaults)
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed; overrides any seed in the config file
    #[arg(long)]
    pub seed: u64,
    /// Output report (JSON)
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-checkpoint curves (CSV)
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Serialize)]
struct FullReport {
    config: SimConfig,
    #[serde(flatten)]
    report: SimReport,
}

pub fn run(args: Args) -> CliResult<()> {
    let mut config: SimConfig = read_json(&args.config)?;
    config.seed = args.seed;
    let report = simulate(&config)?;

    if let Some(csv_path) = &args.csv {
        let mut out = String::from("iteration,teacher_pq,student_pq,mean_lambda,n_pseudo_segments\n");
        for c in &report.checkpoints {
            out += &format!(
                "{},{},{},{},{}\n",
                c.iteration, c.teacher_pq, c.student_pq, c.mean_lambda, c.n_pseudo_segments
            );
        }
        let mut file = std::fs::File::create(csv_path)
            .map_err(|e| CliError::io(format!("cannot write {}: {e}", csv_path.display())))?;
        file.write_all(out.as_bytes())
            .map_err(|e| CliError::io(format!("cannot write {}: {e}", csv_path.display())))?;
    }

    write_json(&args.out, &FullReport { config, report })
}
