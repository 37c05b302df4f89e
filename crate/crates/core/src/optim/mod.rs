//! Composite-token optimization: entropy loss, semantic binding loss and
//! the per-timestep gradient update during the early denoising window.

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, DenoiserAdapter, Latent, MapGrad, UpstreamGradients};
use crate::embed::{EmbedError, EmbeddingMatrix, EncoderError, SurgeryResult, TextEncoder};
use crate::probe::{
    capture, entropy_grad_probs, normalize, normalize_vjp, token_entropy, AttentionMap,
    CaptureRequest, LayerId, ProbeError,
};
use crate::prompt::{noun_phrase, ParsedPrompt};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("no captured map for composite {entity} at layer {layer}")]
    MissingMap { entity: usize, layer: LayerId },
    #[error("loss or gradient became non-finite; optimization aborted")]
    NonFiniteLoss,
    #[error("step {step_index} is outside the optimization window of {window} steps")]
    WindowClosed { step_index: usize, window: usize },
    #[error("optimization was aborted by an earlier non-finite loss")]
    Aborted,
    #[error("surgery produced no composite tokens")]
    NoComposites,
    #[error("composite {0} has no sequence position")]
    UnplacedComposite(usize),
    #[error("missing supervision encoding for entity {0}")]
    MissingSupervision(usize),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Which prompt supervises each entity's semantic binding loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupervisionMode {
    /// Per-entity noun phrase, e.g. "a dog with a hat".
    NounPhrase,
    /// The full original prompt for every entity.
    FullPrompt,
}

/// Tunables of the iterative composite-token update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Trade-off weight on the semantic binding loss; 0 disables it.
    pub lambda: f64,
    /// Fraction of sampling steps that are optimized, from the start.
    pub t_opt_fraction: f64,
    /// Gradient-descent step size.
    pub step_size: f64,
    /// Gradient steps per optimized timestep.
    pub steps_per_timestep: usize,
    /// Cross-attention layers feeding the entropy loss.
    pub probed_layers: Vec<LayerId>,
    pub supervision_mode: SupervisionMode,
    /// Also update the substituted EOT rows.
    pub update_ets: bool,
    /// Entropy loss on composite maps; off reproduces the
    /// semantic-loss-only ablation.
    pub use_entropy_loss: bool,
    /// Optimize only this many entities per step (deterministic seeded
    /// choice), bounding the semantic loss to that many extra passes.
    pub entity_subsample: Option<usize>,
}

/// The default probed layers: first three decoder cross-attention layers.
pub fn default_probed_layers() -> Vec<LayerId> {
    vec![
        LayerId::new("dec.attn.0"),
        LayerId::new("dec.attn.1"),
        LayerId::new("dec.attn.2"),
    ]
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            t_opt_fraction: 0.2,
            step_size: 0.01,
            steps_per_timestep: 1,
            probed_layers: default_probed_layers(),
            supervision_mode: SupervisionMode::NounPhrase,
            update_ets: false,
            use_entropy_loss: true,
            entity_subsample: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.t_opt_fraction > 0.0 && self.t_opt_fraction <= 1.0) {
            return Err(format!(
                "t_opt_fraction {} not in (0, 1]",
                self.t_opt_fraction
            ));
        }
        if self.lambda < 0.0 {
            return Err(format!("lambda {} negative", self.lambda));
        }
        if self.step_size < 0.0 {
            return Err(format!("step_size {} negative", self.step_size));
        }
        if self.steps_per_timestep == 0 {
            return Err("steps_per_timestep must be at least 1".into());
        }
        Ok(())
    }
}

/// Losses measured at one optimized timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub step_index: usize,
    pub timestep: usize,
    pub entropy: f64,
    pub semantic: f64,
    pub total: f64,
}

/// Mutable optimization state: the surgered conditioning whose composite
/// rows (and optionally EOT rows) are trained, the frozen supervision
/// encodings and the loss trace.
#[derive(Debug, Clone)]
pub struct BindingState {
    pub surgery: SurgeryResult,
    /// One frozen supervision encoding per entity, in entity order.
    pub supervision: Vec<EmbeddingMatrix>,
    pub trace: Vec<LossSample>,
    pub aborted: bool,
}

impl BindingState {
    /// Builds the state from a surgery result, encoding supervision
    /// prompts per the configured mode.
    pub fn prepare(
        parsed: &ParsedPrompt,
        surgery: SurgeryResult,
        encoder: &dyn TextEncoder,
        config: &OptimizerConfig,
    ) -> Result<Self, OptimError> {
        if surgery.composites.is_empty() {
            return Err(OptimError::NoComposites);
        }
        let mut supervision = Vec::with_capacity(surgery.composites.len());
        for c in &surgery.composites {
            c.position
                .ok_or(OptimError::UnplacedComposite(c.entity_index))?;
            let prompt = match config.supervision_mode {
                SupervisionMode::NounPhrase => noun_phrase(parsed, c.entity_index)
                    .ok_or(OptimError::MissingSupervision(c.entity_index))?,
                SupervisionMode::FullPrompt => parsed.prompt.clone(),
            };
            supervision.push(encoder.encode(&prompt)?);
        }
        Ok(Self {
            surgery,
            supervision,
            trace: Vec::new(),
            aborted: false,
        })
    }

    /// The conditioning to run generation with.
    pub fn conditioning(&self) -> &EmbeddingMatrix {
        &self.surgery.matrix
    }

    fn composite_positions(&self) -> Result<Vec<usize>, OptimError> {
        self.surgery
            .composites
            .iter()
            .map(|c| {
                c.position
                    .ok_or(OptimError::UnplacedComposite(c.entity_index))
            })
            .collect()
    }
}

/// Number of optimized sampling steps: ceil(fraction * total), with a
/// guard against floating-point dust on exact multiples.
pub fn optimized_step_count(t_opt_fraction: f64, total_steps: usize) -> usize {
    let x = t_opt_fraction * total_steps as f64;
    let nearest = x.round();
    let steps = if (x - nearest).abs() < 1e-9 {
        nearest
    } else {
        x.ceil()
    };
    (steps as usize).min(total_steps)
}

/// Whether sampling step `step_index` falls inside the optimization
/// window.
pub fn in_window(step_index: usize, t_opt_fraction: f64, total_steps: usize) -> bool {
    step_index < optimized_step_count(t_opt_fraction, total_steps)
}

/// Sum of the entropies of every composite token's map on every probed
/// layer. `composite_positions` pairs each entity index with its row
/// position. Maps not yet normalized are normalized first.
pub fn entropy_loss(
    maps: &[AttentionMap],
    composite_positions: &[(usize, usize)],
    probed_layers: &[LayerId],
) -> Result<f64, OptimError> {
    let mut total = 0.0;
    for &(entity, position) in composite_positions {
        for layer in probed_layers {
            let map = maps
                .iter()
                .find(|m| m.token_position == position && &m.layer == layer)
                .ok_or_else(|| OptimError::MissingMap {
                    entity,
                    layer: layer.clone(),
                })?;
            total += if map.is_normalized() {
                token_entropy(map)?
            } else {
                token_entropy(&normalize(map)?)?
            };
        }
    }
    Ok(total)
}

/// Combined objective `L_ent + lambda * L_sem`.
pub fn total_loss(l_ent: f64, l_sem: f64, config: &OptimizerConfig) -> Result<f64, OptimError> {
    if !l_ent.is_finite() || !l_sem.is_finite() {
        return Err(OptimError::NonFiniteLoss);
    }
    let total = l_ent + config.lambda * l_sem;
    if !total.is_finite() {
        return Err(OptimError::NonFiniteLoss);
    }
    Ok(total)
}

/// Semantic binding loss over all entities: for each composite, the
/// squared norm of the difference between the prediction conditioned on
/// the bare composite row (a length-1 sequence) and the detached
/// prediction conditioned on its frozen supervision encoding.
pub fn semantic_binding_loss(
    latent: &Latent,
    timestep: usize,
    state: &BindingState,
    adapter: &dyn DenoiserAdapter,
) -> Result<f64, OptimError> {
    let all: Vec<usize> = (0..state.surgery.composites.len()).collect();
    let terms = semantic_terms(latent, timestep, state, adapter, &all)?;
    Ok(terms.iter().map(|t| t.loss).sum())
}

struct SemanticTerm {
    entity_slot: usize,
    loss: f64,
    /// 2 * (prediction - target): upstream gradient on the
    /// composite-conditioned prediction.
    upstream: Latent,
    composite_conditioning: EmbeddingMatrix,
}

fn semantic_terms(
    latent: &Latent,
    timestep: usize,
    state: &BindingState,
    adapter: &dyn DenoiserAdapter,
    entity_slots: &[usize],
) -> Result<Vec<SemanticTerm>, OptimError> {
    let mut terms = Vec::with_capacity(entity_slots.len());
    for &slot in entity_slots {
        let composite = &state.surgery.composites[slot];
        let position = composite
            .position
            .ok_or(OptimError::UnplacedComposite(composite.entity_index))?;
        let row = state.surgery.matrix.row(position).to_owned();
        let cond = EmbeddingMatrix::reduced(
            row.insert_axis(ndarray::Axis(0)),
            format!("composite:{}", composite.entity_index),
        )?;
        let supervision = state
            .supervision
            .get(slot)
            .ok_or(OptimError::MissingSupervision(composite.entity_index))?;
        let prediction = adapter.predict(latent, timestep, &cond)?;
        let target = adapter.predict(latent, timestep, supervision)?;
        if prediction.shape() != target.shape() {
            return Err(AdapterError::GradientShape.into());
        }
        let diff = Latent(&prediction.0 - &target.0);
        let loss = diff.norm_sq();
        terms.push(SemanticTerm {
            entity_slot: slot,
            loss,
            upstream: Latent(&diff.0 * 2.0),
            composite_conditioning: cond,
        });
    }
    Ok(terms)
}

/// Both loss terms at the current state, without any update. Useful for
/// calibration and gradient checks.
pub fn evaluate_losses(
    state: &BindingState,
    latent: &Latent,
    timestep: usize,
    adapter: &dyn DenoiserAdapter,
    config: &OptimizerConfig,
) -> Result<(f64, f64), OptimError> {
    let eval = evaluate(state, latent, timestep, adapter, config, false, None)?;
    Ok((eval.l_ent, eval.l_sem))
}

/// Suggests a lambda that brings both loss terms within one order of
/// magnitude at the current state.
pub fn calibrate_lambda(
    state: &BindingState,
    latent: &Latent,
    timestep: usize,
    adapter: &dyn DenoiserAdapter,
    config: &OptimizerConfig,
) -> Result<f64, OptimError> {
    let mut probe_cfg = config.clone();
    probe_cfg.lambda = 1.0;
    probe_cfg.use_entropy_loss = true;
    let (l_ent, l_sem) = evaluate_losses(state, latent, timestep, adapter, &probe_cfg)?;
    if l_sem.abs() < 1e-12 || l_ent.abs() < 1e-12 {
        return Ok(config.lambda);
    }
    let ratio = l_ent / l_sem;
    Ok(10f64.powf(ratio.abs().log10().round()))
}

struct StepEval {
    l_ent: f64,
    l_sem: f64,
    /// Full-matrix gradient of the combined loss (lambda folded in);
    /// only trainable rows of it are ever applied.
    grad: Option<Array2<f64>>,
}

fn selected_entities(
    state: &BindingState,
    config: &OptimizerConfig,
    step_index: usize,
    timestep: usize,
) -> Vec<usize> {
    let k = state.surgery.composites.len();
    match config.entity_subsample {
        Some(n) if n < k => {
            let mut rng =
                ChaCha12Rng::seed_from_u64(((timestep as u64) << 32) | step_index as u64);
            let mut picked = sample(&mut rng, k, n).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..k).collect(),
    }
}

fn evaluate(
    state: &BindingState,
    latent: &Latent,
    timestep: usize,
    adapter: &dyn DenoiserAdapter,
    config: &OptimizerConfig,
    want_grad: bool,
    entity_slots: Option<&[usize]>,
) -> Result<StepEval, OptimError> {
    let cond = &state.surgery.matrix;
    let positions = state.composite_positions()?;
    let mut grad: Option<Array2<f64>> =
        want_grad.then(|| Array2::zeros((cond.seq_len(), cond.width())));

    let mut l_ent = 0.0;
    if config.use_entropy_loss {
        let request = CaptureRequest::new(config.probed_layers.clone(), positions.clone());
        let maps = capture(adapter, latent, timestep, cond, request)?;
        let keyed: Vec<(usize, usize)> = state
            .surgery
            .composites
            .iter()
            .zip(&positions)
            .map(|(c, &p)| (c.entity_index, p))
            .collect();
        l_ent = entropy_loss(&maps, &keyed, &config.probed_layers)?;
        if let Some(g) = grad.as_mut() {
            let mut map_grads = Vec::with_capacity(maps.len());
            for map in &maps {
                let upstream = if map.is_normalized() {
                    entropy_grad_probs(map)?
                } else {
                    let normalized = normalize(map)?;
                    normalize_vjp(map.values(), &entropy_grad_probs(&normalized)?)?
                };
                map_grads.push(MapGrad {
                    layer: map.layer.clone(),
                    token_position: map.token_position,
                    grad: upstream,
                });
            }
            let upstream = UpstreamGradients {
                map_grads,
                prediction_grad: None,
            };
            *g += &adapter.conditioning_gradient(latent, timestep, cond, &upstream)?;
        }
    }

    let mut l_sem = 0.0;
    if config.lambda != 0.0 {
        let default_slots: Vec<usize> = (0..state.surgery.composites.len()).collect();
        let slots = entity_slots.unwrap_or(&default_slots);
        let terms = semantic_terms(latent, timestep, state, adapter, slots)?;
        for term in &terms {
            l_sem += term.loss;
            if let Some(g) = grad.as_mut() {
                let upstream = UpstreamGradients {
                    map_grads: vec![],
                    prediction_grad: Some(term.upstream.clone()),
                };
                let row_grad = adapter.conditioning_gradient(
                    latent,
                    timestep,
                    &term.composite_conditioning,
                    &upstream,
                )?;
                let position = state.surgery.composites[term.entity_slot]
                    .position
                    .expect("validated in semantic_terms");
                let mut row = g.row_mut(position);
                row += &(&row_grad.row(0) * config.lambda);
            }
        }
    }

    if let Some(g) = &grad {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteLoss);
        }
    }
    Ok(StepEval { l_ent, l_sem, grad })
}

/// Context of one sampling step handed to [`update_step`].
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    /// Sampling step index, 0-based from the start of denoising.
    pub step_index: usize,
    pub total_steps: usize,
    /// Scheduler timestep of this sampling step.
    pub timestep: usize,
}

/// Runs `steps_per_timestep` gradient-descent updates of the composite
/// rows (and EOT rows when `update_ets`) at one sampling step inside the
/// optimization window, appending one loss sample to the trace.
///
/// The latent is never modified. On a non-finite loss the state is
/// marked aborted and keeps its last finite embeddings.
pub fn update_step(
    state: &mut BindingState,
    latent: &Latent,
    ctx: StepContext,
    adapter: &dyn DenoiserAdapter,
    config: &OptimizerConfig,
) -> Result<(), OptimError> {
    if state.aborted {
        return Err(OptimError::Aborted);
    }
    let window = optimized_step_count(config.t_opt_fraction, ctx.total_steps);
    if ctx.step_index >= window {
        return Err(OptimError::WindowClosed {
            step_index: ctx.step_index,
            window,
        });
    }

    let positions = state.composite_positions()?;
    let mut trainable: Vec<usize> = positions.clone();
    if config.update_ets && state.surgery.ets_applied {
        trainable.extend(state.surgery.matrix.eot_start()..state.surgery.matrix.seq_len());
    }

    let slots = selected_entities(state, config, ctx.step_index, ctx.timestep);
    let mut first: Option<(f64, f64)> = None;
    for _ in 0..config.steps_per_timestep {
        let eval =
            match evaluate(state, latent, ctx.timestep, adapter, config, true, Some(&slots)) {
                Ok(eval) => eval,
                Err(OptimError::NonFiniteLoss) => {
                    state.aborted = true;
                    return Err(OptimError::NonFiniteLoss);
                }
                Err(other) => return Err(other),
            };
        total_loss(eval.l_ent, eval.l_sem, config).inspect_err(|_| {
            state.aborted = true;
        })?;
        if first.is_none() {
            first = Some((eval.l_ent, eval.l_sem));
        }
        if config.step_size != 0.0 {
            let grad = eval.grad.expect("gradient requested");
            for &p in &trainable {
                let update: Array1<f64> = grad.row(p).to_owned() * config.step_size;
                let mut row = state.surgery.matrix.row_mut(p);
                row -= &update;
            }
            for (slot, &p) in positions.iter().enumerate() {
                state.surgery.composites[slot].embedding =
                    state.surgery.matrix.row(p).to_owned();
            }
        }
    }

    let (entropy, semantic) = first.expect("steps_per_timestep >= 1");
    state.trace.push(LossSample {
        step_index: ctx.step_index,
        timestep: ctx.timestep,
        entropy,
        semantic,
        total: entropy + config.lambda * semantic,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{LatentShape, MeanDenoiser, StubDenoiser};
    use crate::embed::{apply_surgery, StubTextEncoder};
    use crate::probe::MapMeta;
    use crate::prompt::{parse_prompt, HeuristicProvider};
    use crate::token::WordTokenizer;
    use ndarray::Array2;

    fn small_config() -> OptimizerConfig {
        OptimizerConfig {
            probed_layers: vec![LayerId::new("dec.attn.0"), LayerId::new("dec.attn.1")],
            ..OptimizerConfig::default()
        }
    }

    fn make_state(
        prompt: &str,
        encoder: &StubTextEncoder,
        config: &OptimizerConfig,
    ) -> BindingState {
        let parsed =
            parse_prompt(prompt, &HeuristicProvider, &WordTokenizer, encoder.seq_len()).unwrap();
        let matrix = encoder.encode(prompt).unwrap();
        let surgery = apply_surgery(&matrix, &parsed, true, encoder).unwrap();
        BindingState::prepare(&parsed, surgery, encoder, config).unwrap()
    }

    fn flat_map(layer: &str, position: usize, values: Array2<f64>) -> AttentionMap {
        AttentionMap::new(
            values,
            MapMeta {
                layer: LayerId::new(layer),
                token_position: position,
                timestep: 999,
                head_averaged: true,
            },
            true,
        )
        .unwrap()
    }

    fn uniform_map(layer: &str, position: usize, n: usize) -> AttentionMap {
        flat_map(layer, position, Array2::from_elem((n, n), 1.0 / (n * n) as f64))
    }

    fn one_hot_map(layer: &str, position: usize, n: usize) -> AttentionMap {
        let mut v = Array2::zeros((n, n));
        v[(0, 0)] = 1.0;
        flat_map(layer, position, v)
    }

    #[test]
    fn entropy_loss_one_hot_single_layer_is_zero() {
        let maps = vec![one_hot_map("dec.attn.0", 2, 8)];
        let l = entropy_loss(&maps, &[(1, 2)], &[LayerId::new("dec.attn.0")]).unwrap();
        assert!(l.abs() <= 1e-6);
    }

    #[test]
    fn entropy_loss_adds_over_tokens() {
        let maps = vec![
            uniform_map("dec.attn.0", 2, 32),
            uniform_map("dec.attn.0", 5, 32),
        ];
        let l = entropy_loss(&maps, &[(1, 2), (2, 5)], &[LayerId::new("dec.attn.0")]).unwrap();
        assert!((l - 2.0 * 1024f64.ln()).abs() < 1e-3, "l = {l}");
    }

    #[test]
    fn entropy_loss_sums_tokens_and_layers() {
        let layers: Vec<LayerId> = ["dec.attn.0", "dec.attn.1", "dec.attn.2"]
            .iter()
            .map(|s| LayerId::new(*s))
            .collect();
        let mut maps = Vec::new();
        let mut expected = 0.0;
        for (i, layer) in ["dec.attn.0", "dec.attn.1", "dec.attn.2"].iter().enumerate() {
            for &(pos, peak) in &[(2usize, 0.4 + 0.1 * i as f64), (5, 0.7)] {
                let n = 4;
                let rest = (1.0 - peak) / ((n * n - 1) as f64);
                let mut v = Array2::from_elem((n, n), rest);
                v[(0, 0)] = peak;
                // per-map oracle, summed independently of entropy_loss
                expected += v.iter().map(|&p: &f64| -p * (p + 1e-12).ln()).sum::<f64>();
                maps.push(flat_map(layer, pos, v));
            }
        }
        let l = entropy_loss(&maps, &[(1, 2), (2, 5)], &layers).unwrap();
        assert!((l - expected).abs() < 1e-9);
    }

    #[test]
    fn entropy_loss_flags_missing_map() {
        let maps = vec![uniform_map("dec.attn.0", 2, 8)];
        let err = entropy_loss(
            &maps,
            &[(1, 2)],
            &[LayerId::new("dec.attn.0"), LayerId::new("dec.attn.1")],
        )
        .unwrap_err();
        assert!(matches!(err, OptimError::MissingMap { entity: 1, .. }));
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut c = OptimizerConfig::default();
        c.lambda = 0.0;
        assert_eq!(total_loss(3.0, 2.0, &c).unwrap(), 3.0);
        c.lambda = 1.0;
        assert_eq!(total_loss(0.0, 5.0, &c).unwrap(), 5.0);
        c.lambda = 0.5;
        assert_eq!(total_loss(2.5, 4.0, &c).unwrap(), 4.5);
        assert!(matches!(
            total_loss(f64::NAN, 0.0, &c),
            Err(OptimError::NonFiniteLoss)
        ));
    }

    #[test]
    fn semantic_loss_is_zero_for_identical_conditionings() {
        let dim = 8;
        let shape = LatentShape { channels: 1, height: 2, width: 2 };
        let adapter = MeanDenoiser::new(dim, shape);
        let encoder = StubTextEncoder::new(dim, 10, 3);
        let config = OptimizerConfig::default();
        let mut state = make_state("a dog with a hat", &encoder, &config);
        // supervise the entity with its own composite row
        let pos = state.surgery.composites[0].position.unwrap();
        let row = state.surgery.matrix.row(pos).to_owned();
        state.supervision = vec![EmbeddingMatrix::reduced(
            row.insert_axis(ndarray::Axis(0)),
            "self".into(),
        )
        .unwrap()];
        let latent = Latent::seeded_normal(2, shape);
        let l = semantic_binding_loss(&latent, 500, &state, &adapter).unwrap();
        assert!(l.abs() < 1e-24, "l = {l}");
    }

    #[test]
    fn semantic_loss_matches_mean_denoiser_closed_form() {
        let dim = 8;
        let shape = LatentShape { channels: 2, height: 3, width: 3 };
        let adapter = MeanDenoiser::new(dim, shape);
        let encoder = StubTextEncoder::new(dim, 12, 9);
        let config = OptimizerConfig::default();
        let state = make_state("a cat wearing hat and a dog wearing glasses", &encoder, &config);
        let latent = Latent::seeded_normal(4, shape);
        let l = semantic_binding_loss(&latent, 400, &state, &adapter).unwrap();

        let mut expected = 0.0;
        for (c, s) in state.surgery.composites.iter().zip(&state.supervision) {
            let comp_mean = state
                .surgery
                .matrix
                .row(c.position.unwrap())
                .mean()
                .unwrap();
            let sup_mean = s.rows().sum() / s.rows().len() as f64;
            expected += (comp_mean - sup_mean).powi(2) * shape.len() as f64;
        }
        assert!((l - expected).abs() / expected.abs().max(1e-12) < 1e-12);
    }

    #[test]
    fn semantic_loss_adds_over_entities() {
        let dim = 8;
        let shape = LatentShape { channels: 1, height: 2, width: 2 };
        let adapter = MeanDenoiser::new(dim, shape);
        let encoder = StubTextEncoder::new(dim, 12, 9);
        let config = OptimizerConfig::default();
        let state = make_state("a cat wearing hat and a dog wearing glasses", &encoder, &config);
        let latent = Latent::seeded_normal(4, shape);
        let both = semantic_binding_loss(&latent, 700, &state, &adapter).unwrap();
        let mut sum = 0.0;
        for slot in 0..2 {
            let terms = semantic_terms(&latent, 700, &state, &adapter, &[slot]).unwrap();
            sum += terms[0].loss;
        }
        assert!((both - sum).abs() < 1e-12);
    }

    #[test]
    fn window_arithmetic_matches_ceiling() {
        for (total, expect) in [(1usize, 1usize), (5, 1), (20, 4), (50, 10)] {
            assert_eq!(optimized_step_count(0.2, total), expect, "T = {total}");
        }
        assert_eq!(optimized_step_count(1.0, 7), 7);
        assert_eq!(optimized_step_count(0.33, 10), 4);
        assert!(in_window(0, 0.2, 5));
        assert!(!in_window(1, 0.2, 5));
    }

    #[test]
    fn update_refuses_outside_window() {
        let dim = 16;
        let adapter = StubDenoiser::small(dim, 21);
        let encoder = StubTextEncoder::new(dim, 16, 5);
        let config = small_config();
        let mut state = make_state("a dog with a hat", &encoder, &config);
        let latent = Latent::seeded_normal(3, adapter.latent_shape());
        let ctx = StepContext {
            step_index: 2,
            total_steps: 10,
            timestep: 800,
        };
        assert!(matches!(
            update_step(&mut state, &latent, ctx, &adapter, &config),
            Err(OptimError::WindowClosed { step_index: 2, window: 2 })
        ));
    }

    #[test]
    fn zero_step_size_leaves_state_bit_identical() {
        let dim = 16;
        let adapter = StubDenoiser::small(dim, 21);
        let encoder = StubTextEncoder::new(dim, 16, 5);
        let mut config = small_config();
        config.step_size = 0.0;
        let mut state = make_state("a dog with a hat", &encoder, &config);
        let before: Vec<u64> = state
            .surgery
            .matrix
            .rows()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let latent = Latent::seeded_normal(3, adapter.latent_shape());
        let ctx = StepContext { step_index: 0, total_steps: 10, timestep: 999 };
        update_step(&mut state, &latent, ctx, &adapter, &config).unwrap();
        let after: Vec<u64> = state
            .surgery
            .matrix
            .rows()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(before, after);
        assert_eq!(state.trace.len(), 1);
    }

    #[test]
    fn entropy_only_descent_is_monotone_on_stub() {
        let dim = 16;
        let adapter = StubDenoiser::small(dim, 21);
        let encoder = StubTextEncoder::new(dim, 16, 5);
        let mut config = small_config();
        config.lambda = 0.0;
        config.step_size = 0.05;
        let mut state =
            make_state("a cat wearing hat and a dog wearing glasses", &encoder, &config);
        let latent = Latent::seeded_normal(3, adapter.latent_shape());
        let mut losses = Vec::new();
        for _ in 0..10 {
            let (l_ent, _) = evaluate_losses(&state, &latent, 999, &adapter, &config).unwrap();
            losses.push(l_ent);
            let ctx = StepContext { step_index: 0, total_steps: 10, timestep: 999 };
            update_step(&mut state, &latent, ctx, &adapter, &config).unwrap();
        }
        assert!(
            losses.windows(2).all(|w| w[1] < w[0]),
            "entropy not monotone: {losses:?}"
        );
    }

    #[test]
    fn only_trainable_rows_change() {
        let dim = 16;
        let adapter = StubDenoiser::small(dim, 21);
        let encoder = StubTextEncoder::new(dim, 16, 5);
        let mut config = small_config();
        config.step_size = 0.05;
        let mut state =
            make_state("a cat wearing hat and a dog wearing glasses", &encoder, &config);
        let before = state.surgery.matrix.clone();
        let positions: Vec<usize> = state
            .surgery
            .composites
            .iter()
            .map(|c| c.position.unwrap())
            .collect();
        let latent = Latent::seeded_normal(3, adapter.latent_shape());
        for step in 0..3 {
            let ctx = StepContext {
                step_index: 0,
                total_steps: 10,
                timestep: 999 - step,
            };
            update_step(&mut state, &latent, ctx, &adapter, &config).unwrap();
        }
        for p in 0..before.seq_len() {
            let unchanged = state
                .surgery
                .matrix
                .row(p)
                .iter()
                .zip(before.row(p).iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if positions.contains(&p) {
                assert!(!unchanged, "composite row {p} should have moved");
            } else {
                assert!(unchanged, "row {p} must stay bit-identical");
            }
        }
        for (c, &p) in state.surgery.composites.iter().zip(&positions) {
            assert_eq!(c.embedding, state.surgery.matrix.row(p).to_owned());
        }
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let dim = 12;
        let adapter = StubDenoiser::small(dim, 33);
        let encoder = StubTextEncoder::new(dim, 14, 5);
        let mut config = small_config();
        config.lambda = 1.0;
        let state = make_state("a dog with a hat", &encoder, &config);
        let latent = Latent::seeded_normal(9, adapter.latent_shape());
        let position = state.surgery.composites[0].position.unwrap();

        let eval = evaluate(&state, &latent, 700, &adapter, &config, true, None).unwrap();
        let analytic = eval.grad.unwrap();

        let loss_at = |state: &BindingState| {
            let (l_ent, l_sem) = evaluate_losses(state, &latent, 700, &adapter, &config).unwrap();
            total_loss(l_ent, l_sem, &config).unwrap()
        };
        let eps = 1e-5;
        for d in [0usize, 3, 7, 11] {
            let mut plus = state.clone();
            plus.surgery.matrix.row_mut(position)[d] += eps;
            plus.surgery.composites[0].embedding[d] += eps;
            let mut minus = state.clone();
            minus.surgery.matrix.row_mut(position)[d] -= eps;
            minus.surgery.composites[0].embedding[d] -= eps;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
            let rel = (analytic[(position, d)] - numeric).abs() / numeric.abs().max(1e-8);
            assert!(
                rel < 1e-3,
                "dim {d}: analytic {} vs numeric {numeric}",
                analytic[(position, d)]
            );
        }
    }

    #[test]
    fn entity_subsampling_is_deterministic_and_bounded() {
        let dim = 8;
        let encoder = StubTextEncoder::new(dim, 12, 9);
        let mut config = OptimizerConfig::default();
        config.entity_subsample = Some(1);
        let state = make_state("a cat wearing hat and a dog wearing glasses", &encoder, &config);
        let a = selected_entities(&state, &config, 3, 700);
        let b = selected_entities(&state, &config, 3, 700);
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        let all = selected_entities(&state, &OptimizerConfig::default(), 3, 700);
        assert_eq!(all, vec![0, 1]);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut c = OptimizerConfig::default();
        c.t_opt_fraction = 0.0;
        assert!(c.validate().is_err());
        c = OptimizerConfig::default();
        c.steps_per_timestep = 0;
        assert!(c.validate().is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }
}
