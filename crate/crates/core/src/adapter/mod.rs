//! Denoiser adapter contract.
//!
//! Everything the pipeline needs from a pretrained latent-diffusion
//! stack sits behind [`DenoiserAdapter`]: noise prediction, the
//! cross-attention layer registry with capture, gradient flow back to
//! conditioning rows, the scheduler step and latent decoding. The
//! optimizer and pipeline never see model internals.

mod stub;

pub use stub::{MeanDenoiser, StubDenoiser};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::embed::EmbeddingMatrix;
use crate::probe::{CaptureHook, CrossAttentionLayer, LayerId};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("conditioning width {got} does not match adapter width {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("latent shape {got:?} does not match adapter shape {want:?}")]
    LatentMismatch {
        got: (usize, usize, usize),
        want: (usize, usize, usize),
    },
    #[error("token position {position} outside conditioning of length {seq_len}")]
    TokenOutOfRange { position: usize, seq_len: usize },
    #[error("upstream gradient shape mismatch")]
    GradientShape,
    #[error("adapter failure: {0}")]
    Failure(String),
}

/// Spatial latent tensor (channels, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct Latent(pub Array3<f64>);

impl Latent {
    /// Standard-normal latent drawn from a seeded ChaCha stream
    /// (Box-Muller), identical across platforms for a fixed seed.
    pub fn seeded_normal(seed: u64, shape: LatentShape) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn(
            (shape.channels, shape.height, shape.width),
            |_| {
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random::<f64>();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            },
        );
        Self(data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sum of squared entries.
    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Latent tensor dimensions of the adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradient of a scalar loss with respect to one captured map.
#[derive(Debug, Clone)]
pub struct MapGrad {
    pub layer: LayerId,
    pub token_position: usize,
    /// d loss / d map values, same shape as the captured map.
    pub grad: Array2<f64>,
}

/// Upstream gradients handed back to the adapter so it can backpropagate
/// through its own attention/prediction internals onto conditioning rows.
#[derive(Debug, Clone, Default)]
pub struct UpstreamGradients {
    pub map_grads: Vec<MapGrad>,
    /// d loss / d noise prediction, same shape as the prediction.
    pub prediction_grad: Option<Latent>,
}

/// Contract over a latent-diffusion denoiser stack.
///
/// Implementations must be deterministic for fixed inputs: the same
/// (latent, timestep, conditioning) yields bit-identical predictions,
/// and arming capture must not perturb the prediction.
pub trait DenoiserAdapter {
    /// Named cross-attention layers with their spatial resolutions.
    fn layers(&self) -> &[CrossAttentionLayer];

    fn latent_shape(&self) -> LatentShape;

    /// Conditioning width D the denoiser accepts.
    fn conditioning_width(&self) -> usize;

    /// Scheduler timesteps for an n-step sampling run, highest noise
    /// first.
    fn timesteps(&self, steps: usize) -> Vec<usize>;

    /// Noise prediction for one conditioned pass. Reduced-length
    /// conditionings (one row, EOT block only) are accepted.
    fn predict(
        &self,
        latent: &Latent,
        timestep: usize,
        conditioning: &EmbeddingMatrix,
    ) -> Result<Latent, AdapterError>;

    /// Same pass with the capture hook filled for the requested
    /// (layer, token) pairs. The prediction must be bit-identical to
    /// [`Self::predict`].
    fn predict_with_capture(
        &self,
        latent: &Latent,
        timestep: usize,
        conditioning: &EmbeddingMatrix,
        hook: &mut CaptureHook,
    ) -> Result<Latent, AdapterError>;

    /// Backpropagates upstream gradients (on captured maps and/or on the
    /// prediction) to the conditioning rows, returning a matrix of the
    /// conditioning's shape.
    fn conditioning_gradient(
        &self,
        latent: &Latent,
        timestep: usize,
        conditioning: &EmbeddingMatrix,
        upstream: &UpstreamGradients,
    ) -> Result<Array2<f64>, AdapterError>;

    /// One scheduler update from the prediction at sampling step
    /// `step_index` of `steps`.
    fn scheduler_step(
        &self,
        latent: &Latent,
        step_index: usize,
        steps: usize,
        prediction: &Latent,
    ) -> Result<Latent, AdapterError>;

    /// Decodes a final latent to an RGB image.
    fn decode(&self, latent: &Latent) -> Result<image::RgbImage, AdapterError>;
}
