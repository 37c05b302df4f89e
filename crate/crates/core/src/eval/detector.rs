//! Object-detector clients and the detection-rate metric.

use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::EvalError;

/// One detection returned by a detector backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    /// (x0, y0, x1, y1) in pixels.
    pub bbox: [f64; 4],
}

/// Local or remote object-detection inference.
pub trait DetectorClient {
    fn detect(&self, image: &Path) -> Result<Vec<Detection>, String>;
}

/// Fraction of images in which `object_name` is detected above the
/// confidence threshold (label match is case-insensitive).
pub fn detscore(
    images: &[PathBuf],
    object_name: &str,
    client: &dyn DetectorClient,
    threshold: f64,
) -> Result<f64, EvalError> {
    if images.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let wanted = object_name.to_lowercase();
    let mut hits = 0usize;
    for image in images {
        let detections = client
            .detect(image)
            .map_err(EvalError::DetectorUnavailable)?;
        if detections
            .iter()
            .any(|d| d.label.to_lowercase() == wanted && d.confidence >= threshold)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

/// Default confidence threshold when none is configured.
pub const DEFAULT_DETECTOR_THRESHOLD: f64 = 0.5;

#[derive(Serialize)]
struct DetectRequest {
    image_base64: String,
}

#[derive(Deserialize)]
struct DetectResponse {
    detections: Vec<Detection>,
}

/// HTTP detector: posts the base64 image, expects
/// `{"detections": [{label, confidence, bbox}]}`.
pub struct HttpDetector {
    client: reqwest::blocking::Client,
    endpoint: String,
}

impl HttpDetector {
    pub fn new(endpoint: &str) -> Result<Self, EvalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| EvalError::DetectorUnavailable(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: endpoint.to_string(),
        })
    }
}

impl DetectorClient for HttpDetector {
    fn detect(&self, image: &Path) -> Result<Vec<Detection>, String> {
        let bytes = std::fs::read(image).map_err(|e| format!("{}: {e}", image.display()))?;
        let request = DetectRequest {
            image_base64: base64::engine::general_purpose::STANDARD.encode(bytes),
        };
        let response = self
            .client
            .post(&self.endpoint)
            .json(&request)
            .send()
            .map_err(|e| e.to_string())?;
        if !response.status().is_success() {
            return Err(format!("status {}", response.status()));
        }
        let body: DetectResponse = response.json().map_err(|e| e.to_string())?;
        Ok(body.detections)
    }
}
