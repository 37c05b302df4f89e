//! Prompt analysis: entity/attribute grouping with token-index spans.
//!
//! A prompt like "a cat wearing glasses and a dog with a hat" splits into
//! K entity groups, each a noun head plus the modifier/relation tokens
//! attached to it by the dependency parse; determiners and conjunctions
//! stay in a residual set. Spans index into the padded token sequence
//! (SOT at 0, content from 1), so a noun that the encoder splits into
//! several subword tokens still yields one covering span.

mod provider;

pub use provider::{
    DepLabel, ExternalParseProvider, HeuristicProvider, ParseProvider, ParsedWord, PosTag,
};

use thiserror::Error;

use crate::token::Tokenizer;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("prompt tokenizes to {tokens} content tokens, limit is {max}")]
    PromptTooLong { tokens: usize, max: usize },
    #[error("parse found no entity noun")]
    NoEntityFound,
    #[error("parse provider: {0}")]
    Provider(String),
}

/// Contiguous run of token positions in the padded sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSpan {
    /// First token position, inclusive. Never 0 (SOT).
    pub start: usize,
    /// One past the last token position.
    pub end: usize,
    /// Surface substring of the prompt covered by the span, lowercased.
    pub text: String,
}

impl TokenSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, position: usize) -> bool {
        position >= self.start && position < self.end
    }
}

/// One entity: its noun head span and the attribute spans bound to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityGroup {
    pub noun: TokenSpan,
    pub attributes: Vec<TokenSpan>,
    /// 1-based entity index in surface order.
    pub index: usize,
}

impl EntityGroup {
    /// All spans of the group: noun first, then attributes left to right.
    pub fn spans(&self) -> impl Iterator<Item = &TokenSpan> {
        std::iter::once(&self.noun).chain(self.attributes.iter())
    }

    /// Total number of tokens covered by the group.
    pub fn token_count(&self) -> usize {
        self.spans().map(TokenSpan::len).sum()
    }

    /// Smallest token position covered by any span of the group.
    pub fn first_position(&self) -> usize {
        self.spans().map(|s| s.start).min().expect("noun span present")
    }
}

/// Entity grouping of a prompt, with full token accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub prompt: String,
    pub groups: Vec<EntityGroup>,
    /// Tokens in no group: determiners of entity nouns, conjunctions,
    /// anything unattached.
    pub residual: Vec<TokenSpan>,
    /// Number of content tokens (positions 1..=token_count are covered by
    /// group and residual spans together).
    pub token_count: usize,
    pub provider_version: String,
    pub tokenizer_version: String,
}

/// Parses `prompt` into entity groups with spans into the padded token
/// sequence of length `seq_len`.
pub fn parse_prompt(
    prompt: &str,
    provider: &dyn ParseProvider,
    tokenizer: &dyn Tokenizer,
    seq_len: usize,
) -> Result<ParsedPrompt, ParseError> {
    if prompt.trim().is_empty() {
        return Err(ParseError::EmptyPrompt);
    }
    let tokens = tokenizer.tokenize(prompt);
    if tokens.is_empty() {
        return Err(ParseError::EmptyPrompt);
    }
    let max = seq_len - 2;
    if tokens.len() > max {
        return Err(ParseError::PromptTooLong {
            tokens: tokens.len(),
            max,
        });
    }

    let words = provider.parse(prompt)?;
    let entities: Vec<usize> = words
        .iter()
        .enumerate()
        .filter(|(_, w)| w.label == DepLabel::Root && w.pos == PosTag::Noun)
        .map(|(i, _)| i)
        .collect();
    if entities.is_empty() {
        return Err(ParseError::NoEntityFound);
    }

    // Transitive entity for each word: follow heads until an entity noun
    // (or give up on a cycle / detached word).
    let entity_of = |mut i: usize| -> Option<usize> {
        for _ in 0..words.len() {
            if entities.contains(&i) {
                return Some(i);
            }
            let head = words[i].head;
            if head == i {
                return None;
            }
            i = head;
        }
        None
    };

    #[derive(Clone, Copy, PartialEq)]
    enum Role {
        Noun(usize),
        Attribute(usize),
        Residual,
    }

    let roles: Vec<Role> = words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if entities.contains(&i) {
                return Role::Noun(i);
            }
            match entity_of(i) {
                Some(e) => {
                    // Determiners of the entity noun itself stay residual;
                    // determiners deeper in the group ("with <a> hat") are
                    // attributes like everything else attached below the
                    // entity.
                    if w.label == DepLabel::Det && w.head == e {
                        Role::Residual
                    } else if w.label == DepLabel::Cc {
                        Role::Residual
                    } else {
                        Role::Attribute(e)
                    }
                }
                None => Role::Residual,
            }
        })
        .collect();

    // Assign each tokenizer token to the parser word covering it, by
    // character overlap; tokens outside every word fall to residual.
    let word_of_token: Vec<Option<usize>> = tokens
        .iter()
        .map(|t| {
            words
                .iter()
                .position(|w| t.start < w.end && t.end > w.start)
        })
        .collect();

    // One span per parser word: the contiguous tokens it covers.
    let span_for_word = |wi: usize| -> Option<TokenSpan> {
        let covered: Vec<usize> = word_of_token
            .iter()
            .enumerate()
            .filter(|(_, w)| **w == Some(wi))
            .map(|(ti, _)| ti)
            .collect();
        let (&first, &last) = (covered.first()?, covered.last()?);
        debug_assert_eq!(last - first + 1, covered.len(), "subword tokens contiguous");
        Some(TokenSpan {
            // +1: position 0 is SOT
            start: first + 1,
            end: last + 2,
            text: prompt[tokens[first].start..tokens[last].end].to_lowercase(),
        })
    };

    let mut groups = Vec::new();
    for (k, &e) in entities.iter().enumerate() {
        let noun = span_for_word(e).ok_or(ParseError::NoEntityFound)?;
        let attributes: Vec<TokenSpan> = roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Role::Attribute(e))
            .filter_map(|(wi, _)| span_for_word(wi))
            .collect();
        groups.push(EntityGroup {
            noun,
            attributes,
            index: k + 1,
        });
    }

    let mut residual: Vec<TokenSpan> = roles
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == Role::Residual)
        .filter_map(|(wi, _)| span_for_word(wi))
        .collect();
    // Tokens covered by no parser word.
    for (ti, w) in word_of_token.iter().enumerate() {
        if w.is_none() {
            residual.push(TokenSpan {
                start: ti + 1,
                end: ti + 2,
                text: tokens[ti].text.clone(),
            });
        }
    }
    residual.sort_by_key(|s| s.start);

    Ok(ParsedPrompt {
        prompt: prompt.to_string(),
        groups,
        residual,
        token_count: tokens.len(),
        provider_version: provider.version().to_string(),
        tokenizer_version: tokenizer.version().to_string(),
    })
}

/// Determiner span for group `k`: the residual determiner directly before
/// the group's first token, if any.
fn determiner_for(parsed: &ParsedPrompt, group: &EntityGroup) -> Option<String> {
    let first = group.first_position();
    parsed
        .residual
        .iter()
        .find(|s| s.end == first && is_determiner(&s.text))
        .map(|s| s.text.clone())
}

fn is_determiner(word: &str) -> bool {
    matches!(word, "a" | "an" | "the" | "one" | "two" | "three" | "some")
}

/// Renders the attribute-stripped prompt: per entity its determiner (or
/// "a") plus the noun, joined by "and".
pub fn clean_prompt(parsed: &ParsedPrompt) -> String {
    parsed
        .groups
        .iter()
        .map(|g| {
            let det = determiner_for(parsed, g).unwrap_or_else(|| "a".to_string());
            format!("{det} {}", g.noun.text)
        })
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Renders the noun phrase of entity `k` (1-based): determiner plus the
/// group's tokens in surface order, e.g. "a dog with a hat". Used as the
/// per-entity supervision prompt.
pub fn noun_phrase(parsed: &ParsedPrompt, k: usize) -> Option<String> {
    let group = parsed.groups.iter().find(|g| g.index == k)?;
    let det = determiner_for(parsed, group).unwrap_or_else(|| "a".to_string());
    let mut spans: Vec<&TokenSpan> = group.spans().collect();
    spans.sort_by_key(|s| s.start);
    let words: Vec<&str> = spans.iter().map(|s| s.text.as_str()).collect();
    Some(format!("{det} {}", words.join(" ")))
}
