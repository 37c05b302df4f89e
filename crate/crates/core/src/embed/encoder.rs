//! Text-encoder adapter contract and the deterministic stub encoder.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::token::{Tokenizer, WordTokenizer};

use super::EmbeddingMatrix;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("prompt tokenizes to {tokens} content tokens, limit is {max}")]
    PromptTooLong { tokens: usize, max: usize },
    #[error("encoder failure: {0}")]
    Failure(String),
}

/// Produces the padded conditioning matrix for a prompt.
///
/// Implementations must be deterministic for fixed weights: the same
/// prompt yields the same matrix bit for bit.
pub trait TextEncoder {
    fn encode(&self, prompt: &str) -> Result<EmbeddingMatrix, EncoderError>;

    /// Conditioning for the classifier-free-guidance unconditional branch
    /// (the empty prompt: SOT followed by EOT padding only).
    fn encode_unconditional(&self) -> Result<EmbeddingMatrix, EncoderError>;

    /// The tokenizer whose token positions all span indices refer to.
    fn tokenizer(&self) -> &dyn Tokenizer;

    /// Embedding width D.
    fn width(&self) -> usize;

    /// Padded sequence length M.
    fn seq_len(&self) -> usize;
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Process-independent 64-bit FNV-1a, so feature vectors are stable
/// across runs and platforms.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Semantic features per lexicon word. Word vectors are sums of feature
/// vectors, which gives the embeddings the additive structure the
/// surgery and analysis code relies on ("queen" - "king" lands on the
/// same direction as "woman" - "man").
fn features(word: &str) -> Option<&'static [&'static str]> {
    Some(match word {
        "queen" => &["royal", "female", "person"],
        "king" => &["royal", "male", "person"],
        "woman" => &["female", "person", "adult"],
        "man" => &["male", "person", "adult"],
        "boy" => &["male", "person", "young"],
        "girl" => &["female", "person", "young"],
        "prince" => &["royal", "male", "person", "young"],
        "princess" => &["royal", "female", "person", "young"],
        "dog" => &["animal", "canine", "adult"],
        "puppy" => &["animal", "canine", "young"],
        "cat" => &["animal", "feline", "adult"],
        "kitten" => &["animal", "feline", "young"],
        "horse" => &["animal", "equine"],
        "rabbit" => &["animal", "lapine"],
        "bird" => &["animal", "avian"],
        "hat" | "cap" => &["object", "wearable", "headwear"],
        "crown" => &["object", "wearable", "headwear", "royal"],
        "glasses" => &["object", "wearable", "eyewear"],
        "sunglasses" => &["object", "wearable", "eyewear", "dark"],
        "scarf" => &["object", "wearable", "neckwear"],
        "ball" => &["object", "toy", "round"],
        "balloon" => &["object", "toy", "round", "light"],
        "cube" => &["object", "angular"],
        "box" => &["object", "angular", "container"],
        "red" => &["color", "hue-red"],
        "blue" => &["color", "hue-blue"],
        "green" => &["color", "hue-green"],
        "yellow" => &["color", "hue-yellow"],
        "purple" => &["color", "hue-purple"],
        "black" => &["color", "hue-black"],
        "white" => &["color", "hue-white"],
        "photo" | "picture" => &["artifact", "depiction"],
        _ => return None,
    })
}

/// Deterministic stand-in for a CLIP-style text encoder.
///
/// Content rows are built from hashed gaussian feature vectors plus a
/// causal context mix and a small positional component; EOT rows carry a
/// scaled summary of the whole prompt the way a causal encoder's end
/// token does. Everything is a pure function of (seed, prompt), which is
/// what the surgery, optimizer and reproducibility tests need.
pub struct StubTextEncoder {
    dim: usize,
    seq_len: usize,
    seed: u64,
    tokenizer: Box<dyn Tokenizer>,
}

/// Weight of the idiosyncratic component for lexicon words; unknown words
/// are pure idiosyncratic vectors.
const IDIO_WEIGHT: f64 = 0.05;
/// Causal context mixed into each content row.
const CONTEXT_WEIGHT: f64 = 0.25;
/// Whole-prompt summary mixed into every EOT row.
const EOT_CONTEXT_WEIGHT: f64 = 0.5;
/// Positional component on every row.
const POSITION_WEIGHT: f64 = 0.02;

impl StubTextEncoder {
    pub fn new(dim: usize, seq_len: usize, seed: u64) -> Self {
        assert!(dim >= 4 && seq_len >= 3);
        Self {
            dim,
            seq_len,
            seed,
            tokenizer: Box::new(WordTokenizer),
        }
    }

    pub fn with_tokenizer(mut self, tokenizer: Box<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    /// Unit-scale gaussian vector derived only from (seed, name).
    fn feature_vec(&self, name: &str) -> Array1<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let scale = 1.0 / (self.dim as f64).sqrt();
        Array1::from_iter((0..self.dim).map(|_| {
            // Box-Muller, so we only depend on uniform draws.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        }))
    }

    fn word_vec(&self, word: &str) -> Array1<f64> {
        match features(word) {
            Some(feats) => {
                let mut v = Array1::zeros(self.dim);
                for f in feats {
                    v += &self.feature_vec(f);
                }
                v + self.feature_vec(&format!("word:{word}")) * IDIO_WEIGHT
            }
            None => self.feature_vec(&format!("word:{word}")),
        }
    }

    fn position_vec(&self, position: usize) -> Array1<f64> {
        self.feature_vec(&format!("pos:{position}")) * POSITION_WEIGHT
    }

    fn build(&self, prompt: &str, content: &[Array1<f64>]) -> EmbeddingMatrix {
        let m = self.seq_len;
        let n = content.len();
        let mut rows = Array2::zeros((m, self.dim));

        rows.row_mut(0)
            .assign(&(self.feature_vec("<sot>") + self.position_vec(0)));

        let mut running_sum: Array1<f64> = Array1::zeros(self.dim);
        for (i, v) in content.iter().enumerate() {
            let mut row = v.clone();
            if i > 0 {
                row += &(&running_sum * (CONTEXT_WEIGHT / i as f64));
            }
            row += &self.position_vec(i + 1);
            rows.row_mut(i + 1).assign(&row);
            running_sum += v;
        }

        let summary = if n > 0 {
            running_sum * (EOT_CONTEXT_WEIGHT / n as f64)
        } else {
            running_sum
        };
        let eot_base = self.feature_vec("<eot>") + &summary;
        let eot_start = n + 1;
        for p in eot_start..m {
            rows.row_mut(p).assign(&(&eot_base + self.position_vec(p)));
        }

        let pooled = rows.row(eot_start.min(m - 1)).to_owned();
        EmbeddingMatrix::assemble(rows, eot_start, Some(pooled), prompt.to_string())
    }
}

impl Default for StubTextEncoder {
    fn default() -> Self {
        Self::new(64, crate::DEFAULT_SEQ_LEN, 0x70ed_c0de)
    }
}

impl TextEncoder for StubTextEncoder {
    fn encode(&self, prompt: &str) -> Result<EmbeddingMatrix, EncoderError> {
        let tokens = self.tokenizer.tokenize(prompt);
        if tokens.is_empty() {
            return Err(EncoderError::EmptyPrompt);
        }
        let max = self.seq_len - 2;
        if tokens.len() > max {
            return Err(EncoderError::PromptTooLong {
                tokens: tokens.len(),
                max,
            });
        }
        let content: Vec<Array1<f64>> = tokens.iter().map(|t| self.word_vec(&t.text)).collect();
        Ok(self.build(prompt, &content))
    }

    fn encode_unconditional(&self) -> Result<EmbeddingMatrix, EncoderError> {
        Ok(self.build("", &[]))
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    fn width(&self) -> usize {
        self.dim
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_is_deterministic() {
        let enc = StubTextEncoder::default();
        let a = enc.encode("a dog with a hat").unwrap();
        let b = enc.encode("a dog with a hat").unwrap();
        assert_eq!(a.rows(), b.rows());
        assert_eq!(a.eot_start(), b.eot_start());
    }

    #[test]
    fn eot_start_counts_content_tokens() {
        let enc = StubTextEncoder::default();
        // SOT, a, photo, of, a, dog -> first EOT at 6
        assert_eq!(enc.encode("a photo of a dog").unwrap().eot_start(), 6);
        // ten words -> EOT block starts at 11, with "dog" at position 7
        assert_eq!(
            enc.encode("a cat wearing sunglasses and a dog wearing a hat")
                .unwrap()
                .eot_start(),
            11
        );
    }

    #[test]
    fn empty_prompt_is_rejected() {
        assert!(matches!(
            StubTextEncoder::default().encode(""),
            Err(EncoderError::EmptyPrompt)
        ));
    }

    #[test]
    fn over_long_prompt_is_rejected() {
        let enc = StubTextEncoder::new(16, 10, 7);
        let long = vec!["dog"; 9].join(" ");
        assert!(matches!(
            enc.encode(&long),
            Err(EncoderError::PromptTooLong { tokens: 9, max: 8 })
        ));
    }

    #[test]
    fn unconditional_is_sot_plus_eot_padding() {
        let enc = StubTextEncoder::default();
        let m = enc.encode_unconditional().unwrap();
        assert_eq!(m.eot_start(), 1);
        assert_eq!(m.seq_len(), crate::DEFAULT_SEQ_LEN);
    }

    #[test]
    fn eot_rows_summarize_prompt_content() {
        let enc = StubTextEncoder::default();
        let with_attr = enc.encode("a dog wearing sunglasses").unwrap();
        let without = enc.encode("a dog").unwrap();
        // The EOT summary must change when attributes change, otherwise
        // end-token substitution would be a no-op.
        let a = with_attr.rows().row(with_attr.eot_start());
        let b = without.rows().row(without.eot_start());
        let diff: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 0.1, "EOT rows should differ, got {diff}");
    }

    #[test]
    fn analogy_offsets_align() {
        let enc = StubTextEncoder::default();
        let row = |p: &str| {
            let m = enc.encode(p).unwrap();
            m.rows().row(5).to_owned() // "a photo of a X" puts X at 5
        };
        let d1 = row("a photo of a queen") - row("a photo of a king");
        let d2 = row("a photo of a woman") - row("a photo of a man");
        let dot = d1.dot(&d2);
        let cos = dot / (d1.dot(&d1).sqrt() * d2.dot(&d2).sqrt());
        assert!(cos >= 0.99, "analogy cosine {cos}");
    }
}
