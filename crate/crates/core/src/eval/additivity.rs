//! Embedding-additivity analysis: analogy offsets and a 2-component
//! principal projection of the analyzed token set.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::embed::TextEncoder;

use super::plot::scatter_png;
use super::{AnalysisKind, AnalysisReport, EvalError};

/// Carrier template the analyzed words are embedded in.
pub const CARRIER_TEMPLATE: &str = "a photo of a";

/// Analogy check `cosine(a - b, c - d)`, e.g. (queen, king, woman, man).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalogyQuadruple {
    pub a: String,
    pub b: String,
    pub c: String,
    pub d: String,
}

impl AnalogyQuadruple {
    pub fn new(a: &str, b: &str, c: &str, d: &str) -> Self {
        Self {
            a: a.into(),
            b: b.into(),
            c: c.into(),
            d: d.into(),
        }
    }

    pub fn words(&self) -> [&str; 4] {
        [&self.a, &self.b, &self.c, &self.d]
    }
}

/// Default quadruples: the royal/gender analogy plus young-animal pairs
/// tracked as regression baselines.
pub fn default_quadruples() -> Vec<AnalogyQuadruple> {
    vec![
        AnalogyQuadruple::new("queen", "king", "woman", "man"),
        AnalogyQuadruple::new("puppy", "dog", "kitten", "cat"),
        AnalogyQuadruple::new("princess", "prince", "girl", "boy"),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadrupleResult {
    pub quadruple: AnalogyQuadruple,
    /// `None` when either offset is (numerically) the zero vector.
    pub cosine: Option<f64>,
}

/// Contextual embedding of `word` inside the carrier prompt: the sum of
/// the rows covering the word's characters.
pub fn word_embedding(
    encoder: &dyn TextEncoder,
    word: &str,
) -> Result<Array1<f64>, EvalError> {
    let carrier = format!("{CARRIER_TEMPLATE} {word}");
    let matrix = encoder.encode(&carrier)?;
    let word_start = CARRIER_TEMPLATE.len() + 1;
    let tokens = encoder.tokenizer().tokenize(&carrier);
    let mut sum = Array1::zeros(matrix.width());
    let mut covered = false;
    for (i, token) in tokens.iter().enumerate() {
        if token.end > word_start {
            sum += &matrix.row(i + 1); // +1 for SOT
            covered = true;
        }
    }
    if !covered {
        return Err(EvalError::EmptyField(format!("word {word:?} not tokenized")));
    }
    Ok(sum)
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Option<f64> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return None;
    }
    Some(a.dot(b) / (na * nb))
}

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix.
/// Returns (eigenvalues, eigenvector columns), descending by value.
fn jacobi_eigen(mut a: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut v = Array2::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off < 1e-18 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[(p, q)].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, new)] = v[(k, old)];
        }
    }
    (values, vectors)
}

/// 2-component principal projection of the rows of `data`, computed from
/// the analyzed set only (via the Gram matrix of the centered rows).
pub fn principal_projection_2d(data: &Array2<f64>) -> Vec<(f64, f64)> {
    let n = data.nrows();
    if n == 0 {
        return Vec::new();
    }
    let mean = data.sum_axis(ndarray::Axis(0)) / n as f64;
    let centered = data - &mean.broadcast((n, data.ncols())).expect("broadcast mean");
    let gram = centered.dot(&centered.t());
    let (values, vectors) = jacobi_eigen(gram);
    let scale = |j: usize| values.get(j).copied().unwrap_or(0.0).max(0.0).sqrt();
    (0..n)
        .map(|i| {
            let x = vectors[(i, 0)] * scale(0);
            let y = if n > 1 { vectors[(i, 1)] * scale(1) } else { 0.0 };
            (x, y)
        })
        .collect()
}

/// Runs the analogy checks and the 2-component projection over every
/// word involved, optionally writing a scatter plot.
pub fn additivity_report(
    encoder: &dyn TextEncoder,
    quadruples: &[AnalogyQuadruple],
    out_dir: Option<&Path>,
) -> Result<AnalysisReport, EvalError> {
    if quadruples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut embeddings: BTreeMap<String, Array1<f64>> = BTreeMap::new();
    for q in quadruples {
        for word in q.words() {
            if !embeddings.contains_key(word) {
                embeddings.insert(word.to_string(), word_embedding(encoder, word)?);
            }
        }
    }

    let results: Vec<QuadrupleResult> = quadruples
        .iter()
        .map(|q| {
            let d1 = &embeddings[&q.a] - &embeddings[&q.b];
            let d2 = &embeddings[&q.c] - &embeddings[&q.d];
            QuadrupleResult {
                quadruple: q.clone(),
                cosine: cosine(&d1, &d2),
            }
        })
        .collect();

    let words: Vec<&String> = embeddings.keys().collect();
    let data = Array2::from_shape_fn((words.len(), encoder.width()), |(i, j)| {
        embeddings[words[i].as_str()][j]
    });
    let coords = principal_projection_2d(&data);

    let mut plot_paths = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| EvalError::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join("additivity_projection.png");
        scatter_png(&coords, false, &path)?;
        plot_paths.push(path);
    }

    Ok(AnalysisReport {
        kind: AnalysisKind::Additivity,
        inputs: json!({
            "carrier": CARRIER_TEMPLATE,
            "quadruples": quadruples,
            "encoder_width": encoder.width(),
        }),
        statistics: json!({
            "results": results,
            "projection": words
                .iter()
                .zip(&coords)
                .map(|(w, (x, y))| json!({"word": w, "x": x, "y": y}))
                .collect::<Vec<_>>(),
        }),
        plot_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::StubTextEncoder;
    use ndarray::array;

    #[test]
    fn jacobi_matches_hand_computed_spectrum() {
        // eigenvalues of [[2,1],[1,2]] are 3 and 1
        let (values, vectors) = jacobi_eigen(array![[2.0, 1.0], [1.0, 2.0]]);
        assert!((values[0] - 3.0).abs() < 1e-12);
        assert!((values[1] - 1.0).abs() < 1e-12);
        // eigenvector for 3 is (1,1)/sqrt(2) up to sign
        let ratio = vectors[(0, 0)] / vectors[(1, 0)];
        assert!((ratio - 1.0).abs() < 1e-9);
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let m = array![
            [4.0, 1.0, 0.5],
            [1.0, 3.0, -0.2],
            [0.5, -0.2, 1.0],
        ];
        let (values, vectors) = jacobi_eigen(m.clone());
        // V diag(w) V^T == M
        let mut rebuilt = Array2::<f64>::zeros((3, 3));
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    rebuilt[(i, j)] += values[k] * vectors[(i, k)] * vectors[(j, k)];
                }
            }
        }
        for (a, b) in rebuilt.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn royal_gender_analogy_holds_on_stub_encoder() {
        let encoder = StubTextEncoder::default();
        let report =
            additivity_report(&encoder, &default_quadruples(), None).unwrap();
        let results: Vec<QuadrupleResult> =
            serde_json::from_value(report.statistics["results"].clone()).unwrap();
        let royal = &results[0];
        assert!(royal.cosine.unwrap() >= 0.99, "cosine {:?}", royal.cosine);
    }

    #[test]
    fn degenerate_quadruple_reports_undefined_cosine() {
        let encoder = StubTextEncoder::default();
        let quads = vec![AnalogyQuadruple::new("dog", "dog", "cat", "cat")];
        let report = additivity_report(&encoder, &quads, None).unwrap();
        let results: Vec<QuadrupleResult> =
            serde_json::from_value(report.statistics["results"].clone()).unwrap();
        assert!(results[0].cosine.is_none());
    }

    #[test]
    fn projection_separates_distinct_words() {
        let encoder = StubTextEncoder::default();
        let report = additivity_report(
            &encoder,
            &[AnalogyQuadruple::new("queen", "king", "woman", "man")],
            None,
        )
        .unwrap();
        let proj = report.statistics["projection"].as_array().unwrap();
        assert_eq!(proj.len(), 4);
        // top component carries nonzero spread
        let xs: Vec<f64> = proj.iter().map(|p| p["x"].as_f64().unwrap()).collect();
        let spread = xs.iter().cloned().fold(f64::MIN, f64::max)
            - xs.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 1e-6);
    }
}
