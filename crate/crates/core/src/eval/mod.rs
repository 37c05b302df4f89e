//! Evaluation harness: the object-binding benchmark, the scoring rubric,
//! scorer/detector clients, and the embedding analyses as persistable
//! reports.

pub mod additivity;
pub mod benchmark;
pub mod detector;
pub mod plot;
pub mod rubric;
pub mod scorer;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::adapter::{DenoiserAdapter, Latent};
use crate::embed::{slice_conditioning, EmbeddingMatrix, EncoderError, TextEncoder};
use crate::pipeline::{generate_with, GenerationConfig, PipelineError};
use crate::probe::{
    capture, entropy_by_position, AttentionMap, CaptureRequest, EntropyReport, LayerId,
    ProbeError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty field: {0}")]
    EmptyField(String),
    #[error("no inputs")]
    EmptyInput,
    #[error("bad rubric: {0}")]
    BadRubric(String),
    #[error("scorer unavailable: {0}")]
    ScorerUnavailable(String),
    #[error("detector unavailable: {0}")]
    DetectorUnavailable(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Pipeline(#[from] Box<PipelineError>),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl From<PipelineError> for EvalError {
    fn from(e: PipelineError) -> Self {
        Self::Pipeline(Box::new(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnalysisKind {
    Additivity,
    CouplingDetscore,
    EntropyPosition,
}

/// A persistable analysis outcome; `statistics` stays recomputable from
/// `inputs` plus the referenced artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub kind: AnalysisKind,
    pub inputs: serde_json::Value,
    pub statistics: serde_json::Value,
    pub plot_paths: Vec<PathBuf>,
}

impl AnalysisReport {
    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&body)?)
    }
}

/// Per-token entropy trend over a short sampling trajectory: captures
/// every content position at the probed layers each step, then averages
/// entropies by position.
#[allow(clippy::too_many_arguments)]
pub fn entropy_position_analysis(
    adapter: &dyn DenoiserAdapter,
    encoder: &dyn TextEncoder,
    prompt: &str,
    steps: usize,
    seed: u64,
    probed_layers: &[LayerId],
    out_dir: Option<&Path>,
) -> Result<(EntropyReport, AnalysisReport), EvalError> {
    let conditioning = encoder.encode(prompt)?;
    let positions: Vec<usize> = conditioning.content_range().collect();
    if positions.is_empty() || steps == 0 {
        return Err(EvalError::EmptyInput);
    }
    let timesteps = adapter.timesteps(steps);
    let mut latent = Latent::seeded_normal(seed, adapter.latent_shape());
    let mut maps: Vec<AttentionMap> = Vec::new();
    for (step, &timestep) in timesteps.iter().enumerate() {
        let request = CaptureRequest::new(probed_layers.to_vec(), positions.clone());
        maps.extend(capture(adapter, &latent, timestep, &conditioning, request)?);
        let prediction = adapter
            .predict(&latent, timestep, &conditioning)
            .map_err(ProbeError::Adapter)?;
        latent = adapter
            .scheduler_step(&latent, step, steps, &prediction)
            .map_err(ProbeError::Adapter)?;
    }
    let report = entropy_by_position(&maps)?;

    let per_map: Vec<serde_json::Value> = maps
        .iter()
        .map(|m| {
            let h = crate::probe::normalize(m)
                .and_then(|n| crate::probe::token_entropy(&n))
                .unwrap_or(f64::NAN);
            json!({
                "layer": m.layer.to_string(),
                "position": m.token_position,
                "timestep": m.timestep,
                "entropy": h,
            })
        })
        .collect();

    let mut plot_paths = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| EvalError::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join("entropy_by_position.png");
        let points: Vec<(f64, f64)> = report
            .per_position
            .iter()
            .map(|(&p, &h)| (p as f64, h))
            .collect();
        plot::scatter_png(&points, true, &path)?;
        plot_paths.push(path);
    }

    let analysis = AnalysisReport {
        kind: AnalysisKind::EntropyPosition,
        inputs: json!({
            "prompt": prompt,
            "steps": steps,
            "seed": seed,
            "layers": probed_layers.iter().map(ToString::to_string).collect::<Vec<_>>(),
        }),
        statistics: json!({
            "per_position": report.per_position,
            "map_count": report.map_count,
            "per_map": per_map,
        }),
        plot_paths,
    };
    Ok((report, analysis))
}

/// Conditioning variants of the information-coupling experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CouplingVariant {
    /// The full padded conditioning.
    Full,
    /// Only the rows of one content token.
    SingleToken,
    /// Only the EOT block.
    EotOnly,
}

/// Generates `images_per_variant` images under full / single-token /
/// EOT-only conditionings and, when a detector is supplied, reports the
/// detection rate of `object_name` per variant.
#[allow(clippy::too_many_arguments)]
pub fn coupling_analysis(
    adapter: &dyn DenoiserAdapter,
    encoder: &dyn TextEncoder,
    base_config: &GenerationConfig,
    target_word: &str,
    images_per_variant: usize,
    detector: Option<&dyn detector::DetectorClient>,
    object_name: &str,
    threshold: f64,
) -> Result<AnalysisReport, EvalError> {
    if images_per_variant == 0 {
        return Err(EvalError::EmptyInput);
    }
    let full = encoder.encode(&base_config.prompt)?;
    let tokens = encoder.tokenizer().tokenize(&base_config.prompt);
    let target = tokens
        .iter()
        .position(|t| t.text.eq_ignore_ascii_case(target_word))
        .ok_or_else(|| EvalError::EmptyField(format!("token {target_word:?} not in prompt")))?;
    let token_position = target + 1; // skip SOT
    let single = slice_conditioning(&full, token_position..token_position + 1)
        .map_err(|e| EvalError::Io(e.to_string()))?;
    let eot = slice_conditioning(&full, full.eot_start()..full.seq_len())
        .map_err(|e| EvalError::Io(e.to_string()))?;

    let variants: [(CouplingVariant, &EmbeddingMatrix); 3] = [
        (CouplingVariant::Full, &full),
        (CouplingVariant::SingleToken, &single),
        (CouplingVariant::EotOnly, &eot),
    ];

    let mut stats = Vec::new();
    for (variant, conditioning) in variants {
        let mut images = Vec::new();
        for i in 0..images_per_variant {
            let mut config = base_config.clone();
            config.enable_tome = false;
            config.enable_ets = false;
            config.enable_optimizer = false;
            config.seed = base_config.seed + i as u64;
            config.run_label = Some(format!("coupling-{variant:?}-{i}").to_lowercase());
            let record = generate_with(&config, adapter, encoder, Some(conditioning))?;
            images.extend(record.image_paths);
        }
        let score = match detector {
            Some(d) => Some(detector::detscore(&images, object_name, d, threshold)?),
            None => None,
        };
        stats.push(json!({
            "variant": variant,
            "images": images.len(),
            "image_paths": images,
            "detscore": score,
        }));
    }

    Ok(AnalysisReport {
        kind: AnalysisKind::CouplingDetscore,
        inputs: json!({
            "prompt": base_config.prompt,
            "target_word": target_word,
            "token_position": token_position,
            "object_name": object_name,
            "threshold": threshold,
            "images_per_variant": images_per_variant,
            "seed": base_config.seed,
        }),
        statistics: json!({ "variants": stats }),
        plot_paths: Vec::new(),
    })
}
