//! HTTP bindings of the adapter contracts.
//!
//! A latent-diffusion stack (e.g. a torch/diffusers process) runs as a
//! sidecar exposing a small JSON protocol; these clients implement
//! [`TextEncoder`] and [`DenoiserAdapter`] against it, so the pipeline
//! drives a real model without linking one. Endpoints, all POST under a
//! base URL:
//!
//! - `/configure {model_cache?, role}` -> `{width, seq_len, latent?, layers?}`
//! - `/tokenize  {prompt}` -> `{tokens: [{text, start, end}]}`
//! - `/encode    {prompt, unconditional}` -> `{rows, eot_start, pooled?}`
//! - `/predict   {latent, shape, timestep, conditioning, capture?}`
//!   -> `{prediction, maps?}`
//! - `/gradient  {latent, shape, timestep, conditioning, upstream}`
//!   -> `{grad}`
//! - `/scheduler-step {latent, shape, step_index, steps, prediction}`
//!   -> `{latent}`
//! - `/timesteps {steps}` -> `{timesteps}`
//! - `/decode    {latent, shape}` -> `{png_base64}`

use std::time::Duration;

use base64::Engine;
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::adapter::{
    AdapterError, DenoiserAdapter, Latent, LatentShape, UpstreamGradients,
};
use crate::embed::{EmbeddingMatrix, EncoderError, TextEncoder};
use crate::probe::{
    AttentionMap, CaptureHook, CrossAttentionLayer, LayerId, MapMeta,
};
use crate::token::{Token, Tokenizer};

const REQUEST_TIMEOUT: Duration = Duration::from_secs(600);

fn client() -> Result<reqwest::blocking::Client, String> {
    reqwest::blocking::Client::builder()
        .timeout(REQUEST_TIMEOUT)
        .build()
        .map_err(|e| e.to_string())
}

fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
    client: &reqwest::blocking::Client,
    base: &str,
    endpoint: &str,
    request: &Req,
) -> Result<Resp, String> {
    let url = format!("{}/{}", base.trim_end_matches('/'), endpoint);
    let response = client
        .post(&url)
        .json(request)
        .send()
        .map_err(|e| format!("{url}: {e}"))?;
    if !response.status().is_success() {
        return Err(format!("{url}: status {}", response.status()));
    }
    response.json().map_err(|e| format!("{url}: {e}"))
}

#[derive(Serialize)]
struct ConfigureRequest<'a> {
    model_cache: Option<&'a str>,
    role: &'a str,
}

#[derive(Deserialize)]
struct ConfigureResponse {
    width: usize,
    seq_len: usize,
    latent: Option<WireLatentShape>,
    layers: Option<Vec<WireLayer>>,
}

#[derive(Serialize, Deserialize)]
struct WireLatentShape {
    channels: usize,
    height: usize,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct WireLayer {
    id: String,
    height: usize,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct WireConditioning {
    rows: Vec<Vec<f64>>,
    eot_start: usize,
}

impl WireConditioning {
    fn from_matrix(m: &EmbeddingMatrix) -> Self {
        Self {
            rows: m.rows().rows().into_iter().map(|r| r.to_vec()).collect(),
            eot_start: m.eot_start(),
        }
    }
}

#[derive(Serialize)]
struct TokenizeRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    tokens: Vec<WireToken>,
}

#[derive(Deserialize)]
struct WireToken {
    text: String,
    start: usize,
    end: usize,
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    prompt: &'a str,
    unconditional: bool,
}

#[derive(Deserialize)]
struct EncodeResponse {
    rows: Vec<Vec<f64>>,
    eot_start: usize,
    pooled: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct PredictRequest<'a> {
    latent: Vec<f64>,
    shape: (usize, usize, usize),
    timestep: usize,
    conditioning: WireConditioning,
    capture: Option<WireCapture<'a>>,
}

#[derive(Serialize)]
struct WireCapture<'a> {
    layers: Vec<&'a str>,
    token_positions: &'a [usize],
    per_head: bool,
}

#[derive(Deserialize)]
struct PredictResponse {
    prediction: Vec<f64>,
    maps: Option<Vec<WireMap>>,
}

#[derive(Deserialize)]
struct WireMap {
    layer: String,
    token_position: usize,
    values: Vec<Vec<f64>>,
    normalized: bool,
    head_averaged: bool,
}

#[derive(Serialize)]
struct GradientRequest {
    latent: Vec<f64>,
    shape: (usize, usize, usize),
    timestep: usize,
    conditioning: WireConditioning,
    upstream: WireUpstream,
}

#[derive(Serialize)]
struct WireUpstream {
    map_grads: Vec<WireMapGrad>,
    prediction_grad: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct WireMapGrad {
    layer: String,
    token_position: usize,
    grad: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct GradientResponse {
    grad: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct SchedulerRequest {
    latent: Vec<f64>,
    shape: (usize, usize, usize),
    step_index: usize,
    steps: usize,
    prediction: Vec<f64>,
}

#[derive(Deserialize)]
struct SchedulerResponse {
    latent: Vec<f64>,
}

#[derive(Serialize)]
struct TimestepsRequest {
    steps: usize,
}

#[derive(Deserialize)]
struct TimestepsResponse {
    timesteps: Vec<usize>,
}

#[derive(Serialize)]
struct DecodeRequest {
    latent: Vec<f64>,
    shape: (usize, usize, usize),
}

#[derive(Deserialize)]
struct DecodeResponse {
    png_base64: String,
}

fn rows_to_array(rows: Vec<Vec<f64>>) -> Result<Array2<f64>, String> {
    let n = rows.len();
    let d = rows.first().map(Vec::len).unwrap_or(0);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, d), flat).map_err(|e| e.to_string())
}

fn latent_to_wire(latent: &Latent) -> (Vec<f64>, (usize, usize, usize)) {
    (latent.0.iter().copied().collect(), latent.shape())
}

fn wire_to_latent(values: Vec<f64>, shape: (usize, usize, usize)) -> Result<Latent, String> {
    Array3::from_shape_vec(shape, values)
        .map(Latent)
        .map_err(|e| e.to_string())
}

/// Tokenizer backed by the sidecar's own tokenizer, so parser spans line
/// up with the remote encoder's token positions.
pub struct RemoteTokenizer {
    client: reqwest::blocking::Client,
    base: String,
    version: String,
}

impl Tokenizer for RemoteTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let resp: Result<TokenizeResponse, String> = post(
            &self.client,
            &self.base,
            "tokenize",
            &TokenizeRequest { prompt: text },
        );
        match resp {
            Ok(r) => r
                .tokens
                .into_iter()
                .map(|t| Token {
                    text: t.text,
                    start: t.start,
                    end: t.end,
                })
                .collect(),
            Err(e) => {
                log::error!("remote tokenize failed: {e}");
                Vec::new()
            }
        }
    }

    fn version(&self) -> &str {
        &self.version
    }
}

/// [`TextEncoder`] over the sidecar protocol.
pub struct HttpTextEncoder {
    client: reqwest::blocking::Client,
    base: String,
    width: usize,
    seq_len: usize,
    tokenizer: RemoteTokenizer,
}

impl HttpTextEncoder {
    pub fn connect(base: &str, model_cache: Option<String>) -> Result<Self, EncoderError> {
        let client = client().map_err(EncoderError::Failure)?;
        let conf: ConfigureResponse = post(
            &client,
            base,
            "configure",
            &ConfigureRequest {
                model_cache: model_cache.as_deref(),
                role: "encoder",
            },
        )
        .map_err(EncoderError::Failure)?;
        Ok(Self {
            tokenizer: RemoteTokenizer {
                client: client.clone(),
                base: base.to_string(),
                version: format!("remote:{base}"),
            },
            client,
            base: base.to_string(),
            width: conf.width,
            seq_len: conf.seq_len,
        })
    }

    fn encode_request(&self, prompt: &str, unconditional: bool) -> Result<EmbeddingMatrix, EncoderError> {
        let resp: EncodeResponse = post(
            &self.client,
            &self.base,
            "encode",
            &EncodeRequest {
                prompt,
                unconditional,
            },
        )
        .map_err(EncoderError::Failure)?;
        let rows = rows_to_array(resp.rows).map_err(EncoderError::Failure)?;
        EmbeddingMatrix::new(
            rows,
            resp.eot_start,
            resp.pooled.map(Array1::from_vec),
            prompt.to_string(),
        )
        .map_err(|e| EncoderError::Failure(e.to_string()))
    }
}

impl TextEncoder for HttpTextEncoder {
    fn encode(&self, prompt: &str) -> Result<EmbeddingMatrix, EncoderError> {
        if prompt.trim().is_empty() {
            return Err(EncoderError::EmptyPrompt);
        }
        let tokens = self.tokenizer.tokenize(prompt);
        let max = self.seq_len - 2;
        if tokens.len() > max {
            return Err(EncoderError::PromptTooLong {
                tokens: tokens.len(),
                max,
            });
        }
        self.encode_request(prompt, false)
    }

    fn encode_unconditional(&self) -> Result<EmbeddingMatrix, EncoderError> {
        self.encode_request("", true)
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn width(&self) -> usize {
        self.width
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }
}

/// [`DenoiserAdapter`] over the sidecar protocol.
pub struct HttpDenoiser {
    client: reqwest::blocking::Client,
    base: String,
    width: usize,
    latent_shape: LatentShape,
    layers: Vec<CrossAttentionLayer>,
}

impl HttpDenoiser {
    pub fn connect(base: &str, model_cache: Option<String>) -> Result<Self, AdapterError> {
        let client = client().map_err(AdapterError::Failure)?;
        let conf: ConfigureResponse = post(
            &client,
            base,
            "configure",
            &ConfigureRequest {
                model_cache: model_cache.as_deref(),
                role: "denoiser",
            },
        )
        .map_err(AdapterError::Failure)?;
        let latent = conf
            .latent
            .ok_or_else(|| AdapterError::Failure("configure: missing latent shape".into()))?;
        let layers = conf
            .layers
            .unwrap_or_default()
            .into_iter()
            .map(|l| CrossAttentionLayer {
                id: LayerId::new(l.id),
                height: l.height,
                width: l.width,
            })
            .collect();
        Ok(Self {
            client,
            base: base.to_string(),
            width: conf.width,
            latent_shape: LatentShape {
                channels: latent.channels,
                height: latent.height,
                width: latent.width,
            },
            layers,
        })
    }

    fn predict_inner(
        &self,
        latent: &Latent,
        timestep: usize,
        conditioning: &EmbeddingMatrix,
        hook: Option<&mut CaptureHook>,
    ) -> Result<Latent, AdapterError> {
        let (values, shape) = latent_to_wire(latent);
        let capture = hook.as_ref().map(|h| {
            let req = h.request();
            WireCapture {
                layers: req.layer_ids.iter().map(|l| l.0.as_str()).collect(),
                token_positions: &req.token_positions,
                per_head: req.per_head,
            }
        });
        let resp: PredictResponse = post(
            &self.client,
            &self.base,
            "predict",
            &PredictRequest {
                latent: values,
                shape,
                timestep,
                conditioning: WireConditioning::from_matrix(conditioning),
                capture,
            },
        )
        .map_err(AdapterError::Failure)?;
        if let Some(hook) = hook {
            let mut maps = Vec::new();
            for wm in resp.maps.unwrap_or_default() {
                let values = rows_to_array(wm.values).map_err(AdapterError::Failure)?;
                let map = AttentionMap::new(
                    values,
                    MapMeta {
                        layer: LayerId::new(wm.layer),
                        token_position: wm.token_position,
                        timestep,
                        head_averaged: wm.head_averaged,
                    },
                    wm.normalized,
                )
                .map_err(|e| AdapterError::Failure(e.to_string()))?;
                maps.push(map);
            }
            hook.record(maps);
        }
        wire_to_latent(resp.prediction, shape).map_err(AdapterError::Failure)
    }
}

impl DenoiserAdapter for HttpDenoiser {
    fn layers(&self) -> &[CrossAttentionLayer] {
        &self.layers
    }

    fn latent_shape(&self) -> LatentShape {
        self.latent_shape
    }

    fn conditioning_width(&self) -> usize {
        self.width
    }

    fn timesteps(&self, steps: usize) -> Vec<usize> {
        let resp: Result<TimestepsResponse, String> = post(
            &self.client,
            &self.base,
            "timesteps",
            &TimestepsRequest { steps },
        );
        match resp {
            Ok(r) => r.timesteps,
            Err(e) => {
                log::error!("remote timesteps failed ({e}); using a linear fallback");
                (0..steps)
                    .map(|s| 999 - (999 * s) / steps.saturating_sub(1).max(1))
                    .collect()
            }
        }
    }

    fn predict(
        &self,
        latent: &Latent,
        timestep: usize,
        conditioning: &EmbeddingMatrix,
    ) -> Result<Latent, AdapterError> {
        self.predict_inner(latent, timestep, conditioning, None)
    }

    fn predict_with_capture(
        &self,
        latent: &Latent,
        timestep: usize,
        conditioning: &EmbeddingMatrix,
        hook: &mut CaptureHook,
    ) -> Result<Latent, AdapterError> {
        self.predict_inner(latent, timestep, conditioning, Some(hook))
    }

    fn conditioning_gradient(
        &self,
        latent: &Latent,
        timestep: usize,
        conditioning: &EmbeddingMatrix,
        upstream: &UpstreamGradients,
    ) -> Result<Array2<f64>, AdapterError> {
        let (values, shape) = latent_to_wire(latent);
        let request = GradientRequest {
            latent: values,
            shape,
            timestep,
            conditioning: WireConditioning::from_matrix(conditioning),
            upstream: WireUpstream {
                map_grads: upstream
                    .map_grads
                    .iter()
                    .map(|g| WireMapGrad {
                        layer: g.layer.0.clone(),
                        token_position: g.token_position,
                        grad: g.grad.rows().into_iter().map(|r| r.to_vec()).collect(),
                    })
                    .collect(),
                prediction_grad: upstream
                    .prediction_grad
                    .as_ref()
                    .map(|p| p.0.iter().copied().collect()),
            },
        };
        let resp: GradientResponse = post(&self.client, &self.base, "gradient", &request)
            .map_err(AdapterError::Failure)?;
        rows_to_array(resp.grad).map_err(AdapterError::Failure)
    }

    fn scheduler_step(
        &self,
        latent: &Latent,
        step_index: usize,
        steps: usize,
        prediction: &Latent,
    ) -> Result<Latent, AdapterError> {
        let (values, shape) = latent_to_wire(latent);
        let resp: SchedulerResponse = post(
            &self.client,
            &self.base,
            "scheduler-step",
            &SchedulerRequest {
                latent: values,
                shape,
                step_index,
                steps,
                prediction: prediction.0.iter().copied().collect(),
            },
        )
        .map_err(AdapterError::Failure)?;
        wire_to_latent(resp.latent, shape).map_err(AdapterError::Failure)
    }

    fn decode(&self, latent: &Latent) -> Result<image::RgbImage, AdapterError> {
        let (values, shape) = latent_to_wire(latent);
        let resp: DecodeResponse = post(
            &self.client,
            &self.base,
            "decode",
            &DecodeRequest {
                latent: values,
                shape,
            },
        )
        .map_err(AdapterError::Failure)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(resp.png_base64)
            .map_err(|e| AdapterError::Failure(e.to_string()))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| AdapterError::Failure(e.to_string()))?;
        Ok(img.to_rgb8())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_conditioning_preserves_layout() {
        let enc = crate::embed::StubTextEncoder::new(8, 6, 1);
        let m = enc.encode("a dog").unwrap();
        let wire = WireConditioning::from_matrix(&m);
        assert_eq!(wire.rows.len(), 6);
        assert_eq!(wire.eot_start, 3);
        let back = rows_to_array(wire.rows).unwrap();
        assert_eq!(&back, m.rows());
    }

    #[test]
    fn latent_wire_roundtrip() {
        let l = Latent::seeded_normal(3, LatentShape { channels: 2, height: 3, width: 4 });
        let (values, shape) = latent_to_wire(&l);
        let back = wire_to_latent(values, shape).unwrap();
        assert_eq!(back, l);
    }
}
