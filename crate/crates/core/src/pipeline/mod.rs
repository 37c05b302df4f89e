//! End-to-end generation: parse -> encode -> surgery -> sampling loop
//! with the optimization window -> decode, plus run records and timing
//! reports.

mod record;

pub use record::{PhaseTimings, RunRecord};

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, DenoiserAdapter, Latent, StubDenoiser};
use crate::embed::{
    apply_surgery, noun_row_composites, EmbedError, EmbeddingMatrix, EncoderError,
    StubTextEncoder, SurgeryResult, TextEncoder,
};
use crate::optim::{
    optimized_step_count, update_step, BindingState, OptimError, OptimizerConfig, StepContext,
};
use crate::probe::{capture, CaptureRequest, ProbeError};
use crate::prompt::{parse_prompt, HeuristicProvider, ParseError, ParsedPrompt};
use crate::remote::{HttpDenoiser, HttpTextEncoder};

/// Environment variable naming the model cache directory handed to
/// remote adapter backends.
pub const MODEL_CACHE_ENV: &str = "TOME_MODEL_CACHE";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot load model {model_ref:?}: {reason}")]
    ModelLoadFailure { model_ref: String, reason: String },
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("prompt analysis failed: {0}")]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("cannot write {path}: {source}")]
    DiskWrite {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot read {path}: {source}")]
    DiskRead {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("record serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Everything one generation run needs; mirrors the CLI flags and the
/// config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub prompt: String,
    pub seed: u64,
    /// Sampling steps T.
    pub sampling_steps: usize,
    pub guidance_scale: f64,
    /// Token merging surgery on the conditional branch.
    pub enable_tome: bool,
    /// End-token substitution (only meaningful with surgery).
    pub enable_ets: bool,
    /// Iterative composite-token update in the early window.
    pub enable_optimizer: bool,
    pub optimizer: OptimizerConfig,
    pub output_dir: PathBuf,
    /// Subdirectory for this run's artifacts; derived from the seed and
    /// wall clock when absent.
    pub run_label: Option<String>,
    pub dump_attention: bool,
    /// Dump attention every N sampling steps.
    pub attention_dump_interval: usize,
    /// Adapter selector: "stub", "stub:<dim>", "stub-small:<dim>" or an
    /// http(s) sidecar base URL.
    pub model_ref: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            seed: 0,
            sampling_steps: 50,
            guidance_scale: 7.5,
            enable_tome: true,
            enable_ets: true,
            enable_optimizer: true,
            optimizer: OptimizerConfig::default(),
            output_dir: PathBuf::from("runs"),
            run_label: None,
            dump_attention: false,
            attention_dump_interval: 10,
            model_ref: "stub".into(),
        }
    }
}

/// The paper's ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Baseline model, nothing enabled.
    A,
    /// Token merging (with ETS) only.
    B,
    /// Merging plus the entropy loss.
    C,
    /// Both losses without merging (gradients hit the noun rows).
    D,
    /// Entropy loss only, no merging.
    E,
    /// Merging plus the semantic loss only.
    F,
    /// The full method.
    Full,
}

impl GenerationConfig {
    /// Applies one ablation row's flags on top of this config.
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::A => {
                self.enable_tome = false;
                self.enable_ets = false;
                self.enable_optimizer = false;
            }
            Ablation::B => {
                self.enable_tome = true;
                self.enable_ets = true;
                self.enable_optimizer = false;
            }
            Ablation::C => {
                self.enable_tome = true;
                self.enable_ets = true;
                self.enable_optimizer = true;
                self.optimizer.use_entropy_loss = true;
                self.optimizer.lambda = 0.0;
            }
            Ablation::D => {
                self.enable_tome = false;
                self.enable_ets = false;
                self.enable_optimizer = true;
                self.optimizer.use_entropy_loss = true;
                if self.optimizer.lambda == 0.0 {
                    self.optimizer.lambda = 1.0;
                }
            }
            Ablation::E => {
                self.enable_tome = false;
                self.enable_ets = false;
                self.enable_optimizer = true;
                self.optimizer.use_entropy_loss = true;
                self.optimizer.lambda = 0.0;
            }
            Ablation::F => {
                self.enable_tome = true;
                self.enable_ets = true;
                self.enable_optimizer = true;
                self.optimizer.use_entropy_loss = false;
                if self.optimizer.lambda == 0.0 {
                    self.optimizer.lambda = 1.0;
                }
            }
            Ablation::Full => {
                self.enable_tome = true;
                self.enable_ets = true;
                self.enable_optimizer = true;
                self.optimizer.use_entropy_loss = true;
                if self.optimizer.lambda == 0.0 {
                    self.optimizer.lambda = 1.0;
                }
            }
        }
        self
    }

    /// Which ablation row the flags correspond to, if any.
    pub fn ablation_signature(&self) -> Option<Ablation> {
        let sem = self.optimizer.lambda != 0.0;
        let ent = self.optimizer.use_entropy_loss;
        Some(
            match (self.enable_tome, self.enable_optimizer, ent, sem) {
                (false, false, _, _) => Ablation::A,
                (true, false, _, _) => Ablation::B,
                (true, true, true, false) => Ablation::C,
                (false, true, true, true) => Ablation::D,
                (false, true, true, false) => Ablation::E,
                (true, true, false, true) => Ablation::F,
                (true, true, true, true) => Ablation::Full,
                _ => return None,
            },
        )
    }
}

/// Materializes the adapter pair behind a model reference.
pub fn resolve_model(
    model_ref: &str,
) -> Result<(Box<dyn DenoiserAdapter>, Box<dyn TextEncoder>), PipelineError> {
    let fail = |reason: &str| PipelineError::ModelLoadFailure {
        model_ref: model_ref.to_string(),
        reason: reason.to_string(),
    };
    if model_ref == "stub" {
        return Ok((
            Box::new(StubDenoiser::new(64, 0x51eed)),
            Box::new(StubTextEncoder::new(64, crate::DEFAULT_SEQ_LEN, 0x70ed_c0de)),
        ));
    }
    if let Some(dim) = model_ref.strip_prefix("stub:") {
        let dim: usize = dim.parse().map_err(|_| fail("bad stub width"))?;
        return Ok((
            Box::new(StubDenoiser::new(dim, 0x51eed)),
            Box::new(StubTextEncoder::new(dim, crate::DEFAULT_SEQ_LEN, 0x70ed_c0de)),
        ));
    }
    if let Some(dim) = model_ref.strip_prefix("stub-small:") {
        let dim: usize = dim.parse().map_err(|_| fail("bad stub width"))?;
        return Ok((
            Box::new(StubDenoiser::small(dim, 0x51eed)),
            Box::new(StubTextEncoder::new(dim, 24, 0x70ed_c0de)),
        ));
    }
    if model_ref.starts_with("http://") || model_ref.starts_with("https://") {
        let cache = std::env::var(MODEL_CACHE_ENV).ok();
        let denoiser = HttpDenoiser::connect(model_ref, cache.clone())
            .map_err(|e| fail(&e.to_string()))?;
        let encoder = HttpTextEncoder::connect(model_ref, cache)
            .map_err(|e| fail(&e.to_string()))?;
        return Ok((Box::new(denoiser), Box::new(encoder)));
    }
    Err(fail("unknown model reference"))
}

struct Phase(Instant);

impl Phase {
    fn start() -> Self {
        Self(Instant::now())
    }

    fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Human-readable label per post-surgery sequence position, for
/// attention dump manifests.
fn position_labels(
    matrix: &EmbeddingMatrix,
    parsed: Option<&ParsedPrompt>,
    surgery: Option<&SurgeryResult>,
) -> Vec<String> {
    let m = matrix.seq_len();
    let mut labels = vec![String::new(); m];
    labels[0] = "<sot>".into();
    for p in matrix.eot_start()..m {
        labels[p] = "<eot>".into();
    }
    for p in matrix.content_range() {
        labels[p] = format!("tok{p}");
    }
    if let Some(parsed) = parsed {
        let mut old_text = vec![String::new(); m];
        for span in parsed
            .groups
            .iter()
            .flat_map(|g| g.spans().cloned().collect::<Vec<_>>())
            .chain(parsed.residual.iter().cloned())
        {
            for p in span.start..span.end {
                if p < m {
                    old_text[p] = span.text.clone();
                }
            }
        }
        match surgery {
            Some(s) => {
                for (old, new) in s.index_map.iter().enumerate() {
                    if let Some(new) = *new {
                        if new < m && matrix.content_range().contains(&new) {
                            labels[new] = old_text[old].clone();
                        }
                    }
                }
                for c in &s.composites {
                    if let Some(p) = c.position {
                        labels[p] = format!("{}*", c.noun_span.text);
                    }
                }
            }
            None => {
                for p in matrix.content_range() {
                    if !old_text[p].is_empty() {
                        labels[p] = old_text[p].clone();
                    }
                }
            }
        }
    }
    labels
}

#[derive(Debug, Serialize, Deserialize)]
struct AttentionDumpEntry {
    token_text: String,
    position: usize,
    layer: String,
    timestep: usize,
    step_index: usize,
    path: String,
}

fn dump_attention_maps(
    adapter: &dyn DenoiserAdapter,
    latent: &Latent,
    step: usize,
    timestep: usize,
    conditioning: &EmbeddingMatrix,
    layers: &[crate::probe::LayerId],
    labels: &[String],
    dir: &std::path::Path,
    manifest: &mut Vec<AttentionDumpEntry>,
) -> Result<(), PipelineError> {
    let positions: Vec<usize> = conditioning.content_range().collect();
    let request = CaptureRequest::new(layers.to_vec(), positions);
    let maps = capture(adapter, latent, timestep, conditioning, request)?;
    std::fs::create_dir_all(dir).map_err(|source| PipelineError::DiskWrite {
        path: dir.to_path_buf(),
        source,
    })?;
    for map in maps {
        let (h, w) = map.shape();
        let max = map.values().iter().copied().fold(0.0f64, f64::max).max(1e-12);
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let v = (map.values()[(y, x)] / max * f64::from(u16::MAX)).round() as u16;
                img.put_pixel(x as u32, y as u32, image::Luma([v]));
            }
        }
        let name = format!("s{step:04}_{}_p{:02}.png", map.layer, map.token_position);
        let path = dir.join(&name);
        img.save(&path).map_err(|e| PipelineError::DiskWrite {
            path: path.clone(),
            source: std::io::Error::other(e),
        })?;
        manifest.push(AttentionDumpEntry {
            token_text: labels
                .get(map.token_position)
                .cloned()
                .unwrap_or_default(),
            position: map.token_position,
            layer: map.layer.to_string(),
            timestep,
            step_index: step,
            path: name,
        });
    }
    Ok(())
}

/// Runs the full pipeline for `config` and persists the image plus the
/// run record under a per-run subdirectory.
pub fn generate(config: &GenerationConfig) -> Result<RunRecord, PipelineError> {
    let (adapter, encoder) = resolve_model(&config.model_ref)?;
    generate_with(config, adapter.as_ref(), encoder.as_ref(), None)
}

/// Bypasses parsing and surgery, driving the sampler straight from the
/// given conditioning (single-token and EOT-only experiments).
pub fn generate_from_conditioning(
    config: &GenerationConfig,
    conditioning: &EmbeddingMatrix,
) -> Result<RunRecord, PipelineError> {
    let (adapter, encoder) = resolve_model(&config.model_ref)?;
    generate_with(config, adapter.as_ref(), encoder.as_ref(), Some(conditioning))
}

/// As [`generate`], with caller-supplied adapters (tests inject small
/// geometries; the CLI resolves from `model_ref`).
pub fn generate_with(
    config: &GenerationConfig,
    adapter: &dyn DenoiserAdapter,
    encoder: &dyn TextEncoder,
    override_conditioning: Option<&EmbeddingMatrix>,
) -> Result<RunRecord, PipelineError> {
    if config.sampling_steps == 0 {
        return Err(PipelineError::Config("sampling_steps must be >= 1".into()));
    }
    config.optimizer.validate().map_err(PipelineError::Config)?;
    let total = Phase::start();
    let started_unix_secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);

    let run_label = config
        .run_label
        .clone()
        .unwrap_or_else(|| format!("run-{}-{}", config.seed, (started_unix_secs * 1e3) as u64));
    let run_dir = config.output_dir.join(&run_label);
    std::fs::create_dir_all(&run_dir).map_err(|source| PipelineError::DiskWrite {
        path: run_dir.clone(),
        source,
    })?;

    let bypass = override_conditioning.is_some();
    let needs_parse = !bypass && (config.enable_tome || config.enable_optimizer);

    // parse
    let phase = Phase::start();
    let parsed = if needs_parse {
        Some(parse_prompt(
            &config.prompt,
            &HeuristicProvider,
            encoder.tokenizer(),
            encoder.seq_len(),
        )?)
    } else {
        None
    };
    let parse_secs = phase.secs();

    // encode
    let phase = Phase::start();
    let encoded = match override_conditioning {
        Some(c) => c.clone(),
        None => encoder.encode(&config.prompt)?,
    };
    let unconditional = encoder.encode_unconditional()?;
    let encode_secs = phase.secs();

    // surgery
    let phase = Phase::start();
    let mut surgery_for_labels: Option<SurgeryResult> = None;
    let mut binding: Option<BindingState> = None;
    let mut plain_conditioning = encoded.clone();
    if !bypass {
        if config.enable_tome {
            let parsed = parsed.as_ref().expect("parsed when tome enabled");
            let surgery = apply_surgery(&encoded, parsed, config.enable_ets, encoder)?;
            surgery_for_labels = Some(surgery.clone());
            if config.enable_optimizer {
                binding = Some(BindingState::prepare(
                    parsed,
                    surgery,
                    encoder,
                    &config.optimizer,
                )?);
            } else {
                plain_conditioning = surgery.matrix;
            }
        } else if config.enable_optimizer {
            let parsed = parsed.as_ref().expect("parsed when optimizer enabled");
            let surgery = noun_row_composites(&encoded, parsed)?;
            binding = Some(BindingState::prepare(
                parsed,
                surgery,
                encoder,
                &config.optimizer,
            )?);
        }
    }
    let surgery_secs = phase.secs();

    let labels = position_labels(
        binding
            .as_ref()
            .map(|b| b.conditioning())
            .unwrap_or(&plain_conditioning),
        parsed.as_ref(),
        binding
            .as_ref()
            .map(|b| &b.surgery)
            .or(surgery_for_labels.as_ref()),
    );

    // sampling
    let phase = Phase::start();
    let mut optimize_secs = 0.0;
    let timesteps = adapter.timesteps(config.sampling_steps);
    let mut latent = Latent::seeded_normal(config.seed, adapter.latent_shape());
    let window = optimized_step_count(config.optimizer.t_opt_fraction, config.sampling_steps);
    let mut manifest: Vec<AttentionDumpEntry> = Vec::new();
    let attn_dir = run_dir.join("attention");

    for (step, &timestep) in timesteps.iter().enumerate() {
        if let Some(state) = binding.as_mut() {
            if step < window && !state.aborted {
                let opt_phase = Phase::start();
                let ctx = StepContext {
                    step_index: step,
                    total_steps: config.sampling_steps,
                    timestep,
                };
                match update_step(state, &latent, ctx, adapter, &config.optimizer) {
                    Ok(()) => {}
                    Err(OptimError::NonFiniteLoss) => {
                        log::warn!(
                            "non-finite loss at step {step}; optimization aborted, \
                             generation continues with the last finite embeddings"
                        );
                    }
                    Err(other) => return Err(other.into()),
                }
                optimize_secs += opt_phase.secs();
            }
        }
        let conditioning = binding
            .as_ref()
            .map(|b| b.conditioning())
            .unwrap_or(&plain_conditioning);

        if config.dump_attention
            && step % config.attention_dump_interval.max(1) == 0
            && !adapter.layers().is_empty()
        {
            let layer_ids: Vec<_> = config
                .optimizer
                .probed_layers
                .iter()
                .filter(|id| adapter.layers().iter().any(|l| &l.id == *id))
                .cloned()
                .collect();
            if !layer_ids.is_empty() {
                dump_attention_maps(
                    adapter,
                    &latent,
                    step,
                    timestep,
                    conditioning,
                    &layer_ids,
                    &labels,
                    &attn_dir,
                    &mut manifest,
                )?;
            }
        }

        // classifier-free guidance: surgery and optimization touch only
        // the conditional branch
        let cond_pred = adapter.predict(&latent, timestep, conditioning)?;
        let uncond_pred = adapter.predict(&latent, timestep, &unconditional)?;
        let guided = Latent(
            &uncond_pred.0 + &((&cond_pred.0 - &uncond_pred.0) * config.guidance_scale),
        );
        latent = adapter.scheduler_step(&latent, step, config.sampling_steps, &guided)?;
    }
    let sampling_secs = phase.secs();

    // decode + persist
    let phase = Phase::start();
    let image = adapter.decode(&latent)?;
    let image_path = run_dir.join("image.png");
    image.save(&image_path).map_err(|e| PipelineError::DiskWrite {
        path: image_path.clone(),
        source: std::io::Error::other(e),
    })?;
    let decode_secs = phase.secs();

    let manifest_path = if manifest.is_empty() {
        None
    } else {
        let path = run_dir.join("attention_manifest.json");
        let body = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, body).map_err(|source| PipelineError::DiskWrite {
            path: path.clone(),
            source,
        })?;
        Some(path)
    };

    let record = RunRecord {
        config: GenerationConfig {
            run_label: Some(run_label),
            ..config.clone()
        },
        image_paths: vec![image_path],
        loss_trace: binding.as_ref().map(|b| b.trace.clone()).unwrap_or_default(),
        optimizer_aborted: binding.as_ref().is_some_and(|b| b.aborted),
        attention_manifest: manifest_path,
        timings: PhaseTimings {
            parse_secs,
            encode_secs,
            surgery_secs,
            sampling_secs,
            optimize_secs,
            decode_secs,
            total_secs: total.secs(),
        },
        started_unix_secs,
    };
    record.save(&run_dir.join("run.json"))?;
    Ok(record)
}

/// Per-phase mean wall-clock seconds over a set of runs, grouped by
/// ablation signature.
#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingRow {
    pub label: String,
    pub runs: usize,
    pub mean: PhaseTimings,
}

pub fn timing_report(records: &[RunRecord]) -> Result<TimingReport, PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::Config("timing report needs >= 1 record".into()));
    }
    let mut groups: std::collections::BTreeMap<String, Vec<&RunRecord>> = Default::default();
    for r in records {
        let label = match r.config.ablation_signature() {
            Some(Ablation::A) => "baseline".to_string(),
            Some(a) => format!("config-{a:?}").to_lowercase(),
            None => "custom".to_string(),
        };
        groups.entry(label).or_default().push(r);
    }
    let rows = groups
        .into_iter()
        .map(|(label, rs)| {
            let n = rs.len() as f64;
            let sum = |f: fn(&PhaseTimings) -> f64| rs.iter().map(|r| f(&r.timings)).sum::<f64>() / n;
            TimingRow {
                label,
                runs: rs.len(),
                mean: PhaseTimings {
                    parse_secs: sum(|t| t.parse_secs),
                    encode_secs: sum(|t| t.encode_secs),
                    surgery_secs: sum(|t| t.surgery_secs),
                    sampling_secs: sum(|t| t.sampling_secs),
                    optimize_secs: sum(|t| t.optimize_secs),
                    decode_secs: sum(|t| t.decode_secs),
                    total_secs: sum(|t| t.total_secs),
                },
            }
        })
        .collect();
    Ok(TimingReport { rows })
}
