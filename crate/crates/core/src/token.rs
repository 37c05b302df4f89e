//! Prompt tokenization.
//!
//! The parser and the text encoder must agree on how a prompt splits into
//! tokens, so the split lives behind one trait. Token indices reported by
//! the rest of the crate are positions in the *padded* sequence: SOT sits
//! at 0, content tokens start at 1, EOT padding fills the tail.

/// One content token with its character span in the source prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    /// Byte offset of the first character in the prompt.
    pub start: usize,
    /// Byte offset one past the last character.
    pub end: usize,
}

/// Splits a prompt into content tokens (no SOT/EOT).
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token>;
    /// Identifies the tokenizer for reproducibility records.
    fn version(&self) -> &str;
}

/// Splits words on the prompt's alphanumeric runs, lowercased.
///
/// This reproduces the word-per-token layout of the padded-sequence
/// examples used throughout the crate; punctuation is dropped.
#[derive(Debug, Default, Clone)]
pub struct WordTokenizer;

impl Tokenizer for WordTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        split_words(text)
            .into_iter()
            .map(|(start, end)| Token {
                text: text[start..end].to_lowercase(),
                start,
                end,
            })
            .collect()
    }

    fn version(&self) -> &str {
        "word/1"
    }
}

/// Word tokenizer that additionally splits configured words into subword
/// pieces, mimicking a subword vocabulary. Used to exercise span alignment
/// when one parser word covers several encoder tokens.
#[derive(Debug, Clone)]
pub struct SubwordTokenizer {
    pieces: Vec<(String, Vec<String>)>,
}

impl SubwordTokenizer {
    /// `pieces` maps a lowercase word to the ordered subword surface forms
    /// it splits into; the concatenation must equal the word.
    pub fn with_pieces(pieces: Vec<(String, Vec<String>)>) -> Self {
        for (word, parts) in &pieces {
            assert_eq!(
                &parts.concat(),
                word,
                "subword pieces must concatenate back to the word"
            );
        }
        Self { pieces }
    }
}

impl Tokenizer for SubwordTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        for (start, end) in split_words(text) {
            let lower = text[start..end].to_lowercase();
            match self.pieces.iter().find(|(w, _)| *w == lower) {
                Some((_, parts)) => {
                    let mut offset = start;
                    for part in parts {
                        out.push(Token {
                            text: part.clone(),
                            start: offset,
                            end: offset + part.len(),
                        });
                        offset += part.len();
                    }
                }
                None => out.push(Token {
                    text: lower,
                    start,
                    end,
                }),
            }
        }
        out
    }

    fn version(&self) -> &str {
        "subword/1"
    }
}

/// Byte ranges of the alphanumeric runs in `text`.
pub fn split_words(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            spans.push((s, i));
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}
