//! Error classification and shared file helpers for the CLI.

use std::fmt;
use std::path::{Path, PathBuf};

use panst_core::panoptic::{MaskPrediction, PanopticSegmentation};
use panst_core::{read_tensor, Error as CoreError, SegmentTable, Tensor};

/// CLI failure with its exit code: 1 for validation, 2 for I/O.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError::Io(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(msg) | CliError::Io(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io { .. }
            | CoreError::BadMagic { .. }
            | CoreError::UnsupportedDtype { .. }
            | CoreError::DtypeMismatch { .. }
            | CoreError::Truncated { .. }
            | CoreError::DimOverflow { .. }
            | CoreError::BadSegmentTable { .. } => CliError::Io(e.to_string()),
            CoreError::InvalidShape { .. } | CoreError::Validation(_) => {
                CliError::Validation(e.to_string())
            }
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Loads a mask prediction from its two tensors.
pub fn load_prediction(mask_logits: &Path, class_logits: &Path) -> CliResult<MaskPrediction> {
    let masks: Tensor<f32> = read_tensor(mask_logits)?;
    let classes: Tensor<f32> = read_tensor(class_logits)?;
    Ok(MaskPrediction::new(classes, masks)?)
}

/// Loads a panoptic segmentation from its id map and segment table.
pub fn load_panoptic(map: &Path, segments: &Path) -> CliResult<PanopticSegmentation> {
    let id_map: Tensor<u32> = read_tensor(map)?;
    let table = SegmentTable::read_jsonl(segments)?;
    let pan = PanopticSegmentation { id_map, table };
    pan.validate()?;
    Ok(pan)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::validation(format!("cannot encode {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("malformed {}: {e}", path.display())))
}

/// `.mct` stems of a directory, sorted for stable processing order.
pub fn mct_stems(dir: &Path) -> CliResult<Vec<String>> {
    let mut stems = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(format!("cannot list {}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(format!("cannot list {}: {e}", dir.display())))?;
        let path = entry.path();
        if path.extension().and_then(|s| s.to_str()) == Some("mct") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn with_jobs<T: Send>(jobs: usize, work: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::validation(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(work))
}

pub fn segments_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.segments.jsonl"))
}
