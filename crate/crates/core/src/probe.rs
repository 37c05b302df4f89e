//! Cross-attention capture and entropy statistics.
//!
//! Maps are per-token spatial grids read from the denoiser's
//! cross-attention layers (head-averaged, post-softmax). This module owns
//! their normalization, the entropy math in nats with its analytic
//! gradients, and the capture bookkeeping; the denoiser adapter produces
//! the raw grids.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, DenoiserAdapter, Latent};

/// Stability epsilon inside the entropy log.
pub const ENTROPY_EPS: f64 = 1e-12;
/// A map whose mass is at or below this cannot be normalized.
pub const DEGENERATE_SUM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("attention map mass {sum} is degenerate")]
    DegenerateMap { sum: f64 },
    #[error("map is not normalized (sum {sum})")]
    NotNormalized { sum: f64 },
    #[error("no maps to aggregate")]
    EmptyAggregate,
    #[error("unknown cross-attention layer {0}")]
    UnknownLayer(String),
    #[error("capture read before the forward pass ran")]
    CaptureNotArmed,
    #[error("attention map holds negative or non-finite values")]
    InvalidValues,
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

/// Name of a cross-attention layer in the denoiser's registry.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId(pub String);

impl LayerId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Registry entry the adapter exposes per cross-attention layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossAttentionLayer {
    pub id: LayerId,
    pub height: usize,
    pub width: usize,
}

/// What to capture during one forward pass.
#[derive(Debug, Clone)]
pub struct CaptureRequest {
    pub layer_ids: Vec<LayerId>,
    pub token_positions: Vec<usize>,
    /// Keep per-head maps instead of averaging heads (diagnostics).
    pub per_head: bool,
}

impl CaptureRequest {
    pub fn new(layer_ids: Vec<LayerId>, token_positions: Vec<usize>) -> Self {
        Self {
            layer_ids,
            token_positions,
            per_head: false,
        }
    }
}

/// Spatial cross-attention distribution of one token at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    values: Array2<f64>,
    pub layer: LayerId,
    pub token_position: usize,
    /// Scheduler timestep of the pass that produced the map.
    pub timestep: usize,
    pub head_averaged: bool,
    normalized: bool,
}

/// Identifying metadata for a captured map.
#[derive(Debug, Clone)]
pub struct MapMeta {
    pub layer: LayerId,
    pub token_position: usize,
    pub timestep: usize,
    pub head_averaged: bool,
}

impl AttentionMap {
    /// Wraps a non-negative grid. `normalized` asserts the grid already
    /// sums to one (checked to 1e-6).
    pub fn new(values: Array2<f64>, meta: MapMeta, normalized: bool) -> Result<Self, ProbeError> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ProbeError::InvalidValues);
        }
        if normalized {
            let sum: f64 = values.sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(ProbeError::NotNormalized { sum });
            }
        }
        Ok(Self {
            values,
            layer: meta.layer,
            token_position: meta.token_position,
            timestep: meta.timestep,
            head_averaged: meta.head_averaged,
            normalized,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    fn meta(&self) -> MapMeta {
        MapMeta {
            layer: self.layer.clone(),
            token_position: self.token_position,
            timestep: self.timestep,
            head_averaged: self.head_averaged,
        }
    }
}

/// Scales the map to unit mass.
pub fn normalize(map: &AttentionMap) -> Result<AttentionMap, ProbeError> {
    let sum: f64 = map.values.sum();
    if sum <= DEGENERATE_SUM {
        return Err(ProbeError::DegenerateMap { sum });
    }
    let mut out = AttentionMap::new(&map.values / sum, map.meta(), false)?;
    out.normalized = true;
    Ok(out)
}

/// Shannon entropy in nats: sum of -p * ln(p + eps), clamped at zero.
///
/// For an H x W grid the value lies in [0, ln(H*W)].
pub fn token_entropy(map: &AttentionMap) -> Result<f64, ProbeError> {
    if !map.normalized {
        return Err(ProbeError::NotNormalized {
            sum: map.values.sum(),
        });
    }
    let h: f64 = map
        .values
        .iter()
        .map(|&p| -p * (p + ENTROPY_EPS).ln())
        .sum();
    Ok(h.max(0.0))
}

/// d entropy / d p for a normalized map: -(ln(p + eps) + p / (p + eps)).
pub fn entropy_grad_probs(map: &AttentionMap) -> Result<Array2<f64>, ProbeError> {
    if !map.normalized {
        return Err(ProbeError::NotNormalized {
            sum: map.values.sum(),
        });
    }
    Ok(map
        .values
        .mapv(|p| -((p + ENTROPY_EPS).ln() + p / (p + ENTROPY_EPS))))
}

/// Numerically stable softmax over the whole grid.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Vector-Jacobian product of a whole-grid softmax:
/// `g_z = p * (u - <u, p>)` for probabilities `p` and upstream `u`.
pub fn softmax_vjp(probs: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
    let inner: f64 = (probs * upstream).sum();
    probs * &upstream.mapv(|u| u - inner)
}

/// Vector-Jacobian product of mass normalization `p = a / sum(a)`:
/// `g_a = (u - <u, p>) / sum(a)`.
pub fn normalize_vjp(raw: &Array2<f64>, upstream: &Array2<f64>) -> Result<Array2<f64>, ProbeError> {
    let sum: f64 = raw.sum();
    if sum <= DEGENERATE_SUM {
        return Err(ProbeError::DegenerateMap { sum });
    }
    let probs = raw / sum;
    let inner: f64 = (&probs * upstream).sum();
    Ok(upstream.mapv(|u| (u - inner) / sum))
}

/// d entropy / d logits for a map that is the softmax of those logits.
pub fn entropy_grad_logits(map: &AttentionMap) -> Result<Array2<f64>, ProbeError> {
    let gp = entropy_grad_probs(map)?;
    Ok(softmax_vjp(&map.values, &gp))
}

/// Mean token entropy by sequence position, aggregated over timesteps,
/// layers and heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyReport {
    /// Mean entropy per token position.
    pub per_position: BTreeMap<usize, f64>,
    /// Mean entropy per (layer, position).
    pub per_layer: BTreeMap<LayerId, BTreeMap<usize, f64>>,
    pub map_count: usize,
    /// (min, max) timestep seen in the aggregate.
    pub timestep_range: (usize, usize),
}

/// Averages per-map entropies by token position. Maps that are not yet
/// normalized are normalized on the fly.
pub fn entropy_by_position(maps: &[AttentionMap]) -> Result<EntropyReport, ProbeError> {
    if maps.is_empty() {
        return Err(ProbeError::EmptyAggregate);
    }
    let mut by_pos: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut by_layer: BTreeMap<LayerId, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    let mut t_min = usize::MAX;
    let mut t_max = 0usize;
    for map in maps {
        let h = if map.normalized {
            token_entropy(map)?
        } else {
            token_entropy(&normalize(map)?)?
        };
        let e = by_pos.entry(map.token_position).or_insert((0.0, 0));
        e.0 += h;
        e.1 += 1;
        let le = by_layer
            .entry(map.layer.clone())
            .or_default()
            .entry(map.token_position)
            .or_insert((0.0, 0));
        le.0 += h;
        le.1 += 1;
        t_min = t_min.min(map.timestep);
        t_max = t_max.max(map.timestep);
    }
    let mean = |m: BTreeMap<usize, (f64, usize)>| {
        m.into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect::<BTreeMap<_, _>>()
    };
    Ok(EntropyReport {
        per_position: mean(by_pos),
        per_layer: by_layer.into_iter().map(|(k, v)| (k, mean(v))).collect(),
        map_count: maps.len(),
        timestep_range: (t_min, t_max),
    })
}

/// Capture registration for one forward pass. Reading maps before the
/// adapter recorded them is an error; a hook serves one pass only.
#[derive(Debug)]
pub struct CaptureHook {
    request: CaptureRequest,
    recorded: Option<Vec<AttentionMap>>,
}

impl CaptureHook {
    pub fn arm(request: CaptureRequest) -> Self {
        Self {
            request,
            recorded: None,
        }
    }

    pub fn request(&self) -> &CaptureRequest {
        &self.request
    }

    /// Called by the adapter after the pass.
    pub fn record(&mut self, maps: Vec<AttentionMap>) {
        self.recorded = Some(maps);
    }

    pub fn maps(&self) -> Result<&[AttentionMap], ProbeError> {
        self.recorded
            .as_deref()
            .ok_or(ProbeError::CaptureNotArmed)
    }

    pub fn take(self) -> Result<Vec<AttentionMap>, ProbeError> {
        self.recorded.ok_or(ProbeError::CaptureNotArmed)
    }
}

/// Runs one conditioned pass with capture armed and returns the
/// head-averaged maps for every requested (layer, token) pair.
pub fn capture(
    adapter: &dyn DenoiserAdapter,
    latent: &Latent,
    timestep: usize,
    conditioning: &crate::embed::EmbeddingMatrix,
    request: CaptureRequest,
) -> Result<Vec<AttentionMap>, ProbeError> {
    let known = adapter.layers();
    for id in &request.layer_ids {
        if !known.iter().any(|l| &l.id == id) {
            return Err(ProbeError::UnknownLayer(id.to_string()));
        }
    }
    if request.token_positions.is_empty() {
        return Ok(Vec::new());
    }
    let mut hook = CaptureHook::arm(request);
    adapter.predict_with_capture(latent, timestep, conditioning, &mut hook)?;
    hook.take()
}
