//! Deterministic denoiser stubs for tests and offline runs.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::embed::EmbeddingMatrix;
use crate::probe::{
    softmax, softmax_vjp, AttentionMap, CaptureHook, CrossAttentionLayer, LayerId, MapMeta,
};

use super::{AdapterError, DenoiserAdapter, Latent, LatentShape, UpstreamGradients};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn seeded_matrix(seed: u64, tag: &str, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ fnv1a(tag.as_bytes()));
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

struct StubLayer {
    spec: CrossAttentionLayer,
    /// Per-head logit projections, (H*W) x D; two heads.
    heads: [Array2<f64>; 2],
}

/// Deterministic stand-in for a UNet denoiser.
///
/// Per layer and head, a token's attention logits are a fixed linear
/// projection of its conditioning row; maps are spatial softmaxes of
/// those logits, averaged over the two heads. The noise prediction is
/// `0.3 * z + tau(t) * reshape(P * mean_row(conditioning))`, linear in
/// the conditioning, so every gradient this adapter reports is exact.
pub struct StubDenoiser {
    dim: usize,
    shape: LatentShape,
    layers: Vec<StubLayer>,
    layer_specs: Vec<CrossAttentionLayer>,
    pred_proj: Array2<f64>,
}

impl StubDenoiser {
    /// Default geometry: three probed decoder layers at 32x32 plus one
    /// mid-block layer at 16x16, latent 4x32x32.
    pub fn new(dim: usize, seed: u64) -> Self {
        Self::with_geometry(
            dim,
            seed,
            LatentShape {
                channels: 4,
                height: 32,
                width: 32,
            },
            &[
                ("dec.attn.0", 32, 32),
                ("dec.attn.1", 32, 32),
                ("dec.attn.2", 32, 32),
                ("mid.attn.0", 16, 16),
            ],
        )
    }

    /// Small geometry for gradient checks and fast tests.
    pub fn small(dim: usize, seed: u64) -> Self {
        Self::with_geometry(
            dim,
            seed,
            LatentShape {
                channels: 2,
                height: 8,
                width: 8,
            },
            &[("dec.attn.0", 8, 8), ("dec.attn.1", 8, 8)],
        )
    }

    pub fn with_geometry(
        dim: usize,
        seed: u64,
        shape: LatentShape,
        layers: &[(&str, usize, usize)],
    ) -> Self {
        let layers: Vec<StubLayer> = layers
            .iter()
            .map(|&(name, h, w)| StubLayer {
                spec: CrossAttentionLayer {
                    id: LayerId::new(name),
                    height: h,
                    width: w,
                },
                heads: [
                    seeded_matrix(seed, &format!("{name}/head0"), h * w, dim),
                    seeded_matrix(seed, &format!("{name}/head1"), h * w, dim),
                ],
            })
            .collect();
        let layer_specs = layers.iter().map(|l| l.spec.clone()).collect();
        // 1/dim keeps predictions O(1) and the conditioning Jacobian
        // tame enough for the default optimizer step size
        let pred_proj = seeded_matrix(seed, "pred", shape.len(), dim) * (1.0 / dim as f64);
        Self {
            dim,
            shape,
            pred_proj,
            layers,
            layer_specs,
        }
    }

    fn check_inputs(
        &self,
        latent: &Latent,
        conditioning: &EmbeddingMatrix,
    ) -> Result<(), AdapterError> {
        if conditioning.width() != self.dim {
            return Err(AdapterError::WidthMismatch {
                got: conditioning.width(),
                want: self.dim,
            });
        }
        let want = (self.shape.channels, self.shape.height, self.shape.width);
        if latent.shape() != want {
            return Err(AdapterError::LatentMismatch {
                got: latent.shape(),
                want,
            });
        }
        Ok(())
    }

    fn time_scale(timestep: usize) -> f64 {
        1.0 + timestep as f64 / 2000.0
    }

    fn mean_row(conditioning: &EmbeddingMatrix) -> Array1<f64> {
        let rows = conditioning.rows();
        rows.sum_axis(ndarray::Axis(0)) / rows.nrows() as f64
    }

    fn layer(&self, id: &LayerId) -> Result<&StubLayer, AdapterError> {
        self.layers
            .iter()
            .find(|l| &l.spec.id == id)
            .ok_or_else(|| AdapterError::Failure(format!("unknown layer {id}")))
    }

    /// Per-head spatial attention probabilities for one token.
    fn head_maps(
        &self,
        layer: &StubLayer,
        conditioning: &EmbeddingMatrix,
        token: usize,
    ) -> Result<[Array2<f64>; 2], AdapterError> {
        if token >= conditioning.seq_len() {
            return Err(AdapterError::TokenOutOfRange {
                position: token,
                seq_len: conditioning.seq_len(),
            });
        }
        let row = conditioning.row(token);
        let (h, w) = (layer.spec.height, layer.spec.width);
        let mut out = Vec::with_capacity(2);
        for head in &layer.heads {
            let logits = head.dot(&row);
            let grid = Array2::from_shape_vec((h, w), logits.to_vec())
                .map_err(|e| AdapterError::Failure(e.to_string()))?;
            out.push(softmax(&grid));
        }
        let b = out.pop().expect("two heads");
        let a = out.pop().expect("two heads");
        Ok([a, b])
    }

    fn run(
        &self,
        latent: &Latent,
        timestep: usize,
        conditioning: &EmbeddingMatrix,
        hook: Option<&mut CaptureHook>,
    ) -> Result<Latent, AdapterError> {
        self.check_inputs(latent, conditioning)?;
        if let Some(hook) = hook {
            let request = hook.request().clone();
            let mut maps = Vec::new();
            for id in &request.layer_ids {
                let layer = self.layer(id)?;
                for &token in &request.token_positions {
                    let [a, b] = self.head_maps(layer, conditioning, token)?;
                    let meta = |head_averaged| MapMeta {
                        layer: id.clone(),
                        token_position: token,
                        timestep,
                        head_averaged,
                    };
                    if request.per_head {
                        for head in [a.clone(), b.clone()] {
                            maps.push(
                                AttentionMap::new(head, meta(false), true)
                                    .map_err(|e| AdapterError::Failure(e.to_string()))?,
                            );
                        }
                    } else {
                        let avg = (&a + &b) * 0.5;
                        maps.push(
                            AttentionMap::new(avg, meta(true), true)
                                .map_err(|e| AdapterError::Failure(e.to_string()))?,
                        );
                    }
                }
            }
            hook.record(maps);
        }

        let mean = Self::mean_row(conditioning);
        let drive = self.pred_proj.dot(&mean) * Self::time_scale(timestep);
        let (c, h, w) = latent.shape();
        let drive = Array3::from_shape_vec((c, h, w), drive.to_vec())
            .map_err(|e| AdapterError::Failure(e.to_string()))?;
        Ok(Latent(&latent.0 * 0.3 + &drive))
    }
}

impl DenoiserAdapter for StubDenoiser {
    fn layers(&self) -> &[CrossAttentionLayer] {
        &self.layer_specs
    }

    fn latent_shape(&self) -> LatentShape {
        self.shape
    }

    fn conditioning_width(&self) -> usize {
        self.dim
    }

    fn timesteps(&self, steps: usize) -> Vec<usize> {
        if steps <= 1 {
            return vec![999];
        }
        (0..steps).map(|s| 999 - (999 * s) / (steps - 1)).collect()
    }

    fn predict(
        &self,
        latent: &Latent,
        timestep: usize,
        conditioning: &EmbeddingMatrix,
    ) -> Result<Latent, AdapterError> {
        self.run(latent, timestep, conditioning, None)
    }

    fn predict_with_capture(
        &self,
        latent: &Latent,
        timestep: usize,
        conditioning: &EmbeddingMatrix,
        hook: &mut CaptureHook,
    ) -> Result<Latent, AdapterError> {
        self.run(latent, timestep, conditioning, Some(hook))
    }

    fn conditioning_gradient(
        &self,
        latent: &Latent,
        timestep: usize,
        conditioning: &EmbeddingMatrix,
        upstream: &UpstreamGradients,
    ) -> Result<Array2<f64>, AdapterError> {
        self.check_inputs(latent, conditioning)?;
        let (rows, dim) = (conditioning.seq_len(), conditioning.width());
        let mut grad: Array2<f64> = Array2::zeros((rows, dim));

        for mg in &upstream.map_grads {
            let layer = self.layer(&mg.layer)?;
            if mg.grad.dim() != (layer.spec.height, layer.spec.width) {
                return Err(AdapterError::GradientShape);
            }
            let [a, b] = self.head_maps(layer, conditioning, mg.token_position)?;
            // map = (softmax(A c) + softmax(B c)) / 2
            for (probs, proj) in [(&a, &layer.heads[0]), (&b, &layer.heads[1])] {
                let gz = softmax_vjp(probs, &mg.grad) * 0.5;
                let flat = Array1::from_iter(gz.iter().copied());
                let gr = proj.t().dot(&flat);
                let mut row = grad.row_mut(mg.token_position);
                row += &gr;
            }
        }

        if let Some(pg) = &upstream.prediction_grad {
            if pg.shape() != latent.shape() {
                return Err(AdapterError::GradientShape);
            }
            let flat = Array1::from_iter(pg.0.iter().copied());
            // prediction depends on the mean row, so every row shares
            // the projected gradient scaled by 1/rows
            let gr = self.pred_proj.t().dot(&flat) * (Self::time_scale(timestep) / rows as f64);
            for mut row in grad.rows_mut() {
                row += &gr;
            }
        }
        Ok(grad)
    }

    fn scheduler_step(
        &self,
        latent: &Latent,
        _step_index: usize,
        steps: usize,
        prediction: &Latent,
    ) -> Result<Latent, AdapterError> {
        if prediction.shape() != latent.shape() {
            return Err(AdapterError::GradientShape);
        }
        Ok(Latent(&latent.0 - &(&prediction.0 * (1.0 / steps as f64))))
    }

    fn decode(&self, latent: &Latent) -> Result<image::RgbImage, AdapterError> {
        let (c, h, w) = latent.shape();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| {
                    let v = latent.0[(ch.min(c - 1), y, x)];
                    ((v.tanh() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
                };
                img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        Ok(img)
    }
}

/// Minimal stub whose prediction is the scalar mean of all conditioning
/// entries broadcast over the latent. Its semantic-binding loss has the
/// closed form `(mean(c) - mean(s))^2 * latent_len`, which the optimizer
/// tests use as an independent oracle.
pub struct MeanDenoiser {
    dim: usize,
    shape: LatentShape,
}

impl MeanDenoiser {
    pub fn new(dim: usize, shape: LatentShape) -> Self {
        Self { dim, shape }
    }

    fn scalar_mean(conditioning: &EmbeddingMatrix) -> f64 {
        conditioning.rows().sum() / conditioning.rows().len() as f64
    }
}

impl DenoiserAdapter for MeanDenoiser {
    fn layers(&self) -> &[CrossAttentionLayer] {
        &[]
    }

    fn latent_shape(&self) -> LatentShape {
        self.shape
    }

    fn conditioning_width(&self) -> usize {
        self.dim
    }

    fn timesteps(&self, steps: usize) -> Vec<usize> {
        if steps <= 1 {
            return vec![999];
        }
        (0..steps).map(|s| 999 - (999 * s) / (steps - 1)).collect()
    }

    fn predict(
        &self,
        latent: &Latent,
        _timestep: usize,
        conditioning: &EmbeddingMatrix,
    ) -> Result<Latent, AdapterError> {
        if conditioning.width() != self.dim {
            return Err(AdapterError::WidthMismatch {
                got: conditioning.width(),
                want: self.dim,
            });
        }
        let mean = Self::scalar_mean(conditioning);
        Ok(Latent(Array3::from_elem(latent.shape(), mean)))
    }

    fn predict_with_capture(
        &self,
        latent: &Latent,
        timestep: usize,
        conditioning: &EmbeddingMatrix,
        hook: &mut CaptureHook,
    ) -> Result<Latent, AdapterError> {
        hook.record(Vec::new());
        self.predict(latent, timestep, conditioning)
    }

    fn conditioning_gradient(
        &self,
        latent: &Latent,
        _timestep: usize,
        conditioning: &EmbeddingMatrix,
        upstream: &UpstreamGradients,
    ) -> Result<Array2<f64>, AdapterError> {
        if !upstream.map_grads.is_empty() {
            return Err(AdapterError::Failure(
                "mean denoiser has no attention layers".into(),
            ));
        }
        let mut grad = Array2::zeros((conditioning.seq_len(), conditioning.width()));
        if let Some(pg) = &upstream.prediction_grad {
            if pg.shape() != latent.shape() {
                return Err(AdapterError::GradientShape);
            }
            let total: f64 = pg.0.sum();
            grad.fill(total / conditioning.rows().len() as f64);
        }
        Ok(grad)
    }

    fn scheduler_step(
        &self,
        latent: &Latent,
        _step_index: usize,
        steps: usize,
        prediction: &Latent,
    ) -> Result<Latent, AdapterError> {
        Ok(Latent(&latent.0 - &(&prediction.0 * (1.0 / steps as f64))))
    }

    fn decode(&self, latent: &Latent) -> Result<image::RgbImage, AdapterError> {
        let (_, h, w) = latent.shape();
        Ok(image::RgbImage::new(w as u32, h as u32))
    }
}
