//! Run records: what a generation run produced, persisted as JSON next
//! to its artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::optim::LossSample;

use super::{GenerationConfig, PipelineError};

/// Wall-clock seconds per pipeline phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub parse_secs: f64,
    pub encode_secs: f64,
    pub surgery_secs: f64,
    /// Whole sampling loop, including optimization.
    pub sampling_secs: f64,
    /// Time spent inside composite-token updates (subset of sampling).
    pub optimize_secs: f64,
    pub decode_secs: f64,
    pub total_secs: f64,
}

/// Everything a run produced. All referenced artifacts exist on disk
/// after a successful [`super::generate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    /// Resolved configuration snapshot (run_label filled in).
    pub config: GenerationConfig,
    pub image_paths: Vec<PathBuf>,
    pub loss_trace: Vec<LossSample>,
    pub optimizer_aborted: bool,
    pub attention_manifest: Option<PathBuf>,
    pub timings: PhaseTimings,
    pub started_unix_secs: f64,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body).map_err(|source| PipelineError::DiskWrite {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let body = std::fs::read_to_string(path).map_err(|source| PipelineError::DiskRead {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&body)?)
    }

    /// Content hash of the run outcome, excluding timestamps, timings and
    /// filesystem paths: two runs of the same config and seed hash equal.
    pub fn reproducibility_hash(&self) -> Result<String, PipelineError> {
        let mut hasher = Sha256::new();
        let mut config = self.config.clone();
        config.output_dir = PathBuf::new();
        config.run_label = None;
        hasher.update(serde_json::to_vec(&config)?);
        hasher.update(serde_json::to_vec(&self.loss_trace)?);
        hasher.update([u8::from(self.optimizer_aborted)]);
        for path in &self.image_paths {
            let bytes = std::fs::read(path).map_err(|source| PipelineError::DiskRead {
                path: path.clone(),
                source,
            })?;
            hasher.update(&bytes);
        }
        if let Some(manifest) = &self.attention_manifest {
            let bytes = std::fs::read(manifest).map_err(|source| PipelineError::DiskRead {
                path: manifest.clone(),
                source,
            })?;
            hasher.update(&bytes);
        }
        Ok(hex_string(&hasher.finalize()))
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
