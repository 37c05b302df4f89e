//! Operations on the text-conditioning matrix: composite-token merging,
//! sequence compaction, end-token substitution, slicing and embedding
//! algebra.

mod encoder;

pub use encoder::{EncoderError, StubTextEncoder, TextEncoder};

use ndarray::{s, Array1, Array2};
use thiserror::Error;

use crate::prompt::{clean_prompt, EntityGroup, ParsedPrompt, TokenSpan};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("span [{start}, {end}) outside range [{lo}, {hi})")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        lo: usize,
        hi: usize,
    },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix contains non-finite values")]
    NonFinite,
    #[error("eot_start {eot_start} invalid for sequence length {seq_len}")]
    InvalidEotStart { eot_start: usize, seq_len: usize },
    #[error("parse derives from {parsed:?} but matrix encodes {matrix:?}")]
    PromptMismatch { parsed: String, matrix: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// The padded text-conditioning matrix: one row per token position.
///
/// Position 0 is SOT, content tokens occupy `1..eot_start`, EOT padding
/// fills the rest. Reduced (sliced) conditionings relax the padding
/// convention but keep the type.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: Array2<f64>,
    eot_start: usize,
    pooled: Option<Array1<f64>>,
    source_prompt: String,
}

impl EmbeddingMatrix {
    /// Builds a full padded conditioning; `eot_start` must leave room for
    /// SOT and at least one EOT row, and all values must be finite.
    pub fn new(
        rows: Array2<f64>,
        eot_start: usize,
        pooled: Option<Array1<f64>>,
        source_prompt: String,
    ) -> Result<Self, EmbedError> {
        let seq_len = rows.nrows();
        if eot_start < 1 || eot_start > seq_len.saturating_sub(1) {
            return Err(EmbedError::InvalidEotStart { eot_start, seq_len });
        }
        let m = Self::assemble(rows, eot_start, pooled, source_prompt);
        m.check_finite()?;
        Ok(m)
    }

    /// Builds a reduced conditioning (no padding convention), e.g. a
    /// single-token sequence for the information-coupling experiments.
    pub fn reduced(rows: Array2<f64>, source_prompt: String) -> Result<Self, EmbedError> {
        let eot_start = rows.nrows();
        let m = Self::assemble(rows, eot_start, None, source_prompt);
        m.check_finite()?;
        Ok(m)
    }

    pub(crate) fn assemble(
        rows: Array2<f64>,
        eot_start: usize,
        pooled: Option<Array1<f64>>,
        source_prompt: String,
    ) -> Self {
        Self {
            rows,
            eot_start,
            pooled,
            source_prompt,
        }
    }

    fn check_finite(&self) -> Result<(), EmbedError> {
        if self.rows.iter().all(|v| v.is_finite())
            && self
                .pooled
                .as_ref()
                .is_none_or(|p| p.iter().all(|v| v.is_finite()))
        {
            Ok(())
        } else {
            Err(EmbedError::NonFinite)
        }
    }

    /// All-zero conditioning, useful as the additive identity.
    pub fn zeros(seq_len: usize, width: usize) -> Self {
        Self::assemble(
            Array2::zeros((seq_len, width)),
            seq_len.saturating_sub(1).max(1),
            None,
            String::new(),
        )
    }

    pub const fn sot_index(&self) -> usize {
        0
    }

    pub fn seq_len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn width(&self) -> usize {
        self.rows.ncols()
    }

    pub fn eot_start(&self) -> usize {
        self.eot_start
    }

    /// Content token positions: `1..eot_start`.
    pub fn content_range(&self) -> std::ops::Range<usize> {
        1..self.eot_start
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row(&self, position: usize) -> ndarray::ArrayView1<'_, f64> {
        self.rows.row(position)
    }

    pub(crate) fn row_mut(&mut self, position: usize) -> ndarray::ArrayViewMut1<'_, f64> {
        self.rows.row_mut(position)
    }

    /// Copy of this conditioning with one row replaced (the row must
    /// match the embedding width and be finite).
    pub fn with_row_replaced(
        &self,
        position: usize,
        row: &Array1<f64>,
    ) -> Result<Self, EmbedError> {
        if position >= self.seq_len() || row.len() != self.width() {
            return Err(EmbedError::SpanOutOfRange {
                start: position,
                end: position + 1,
                lo: 0,
                hi: self.seq_len(),
            });
        }
        let mut out = self.clone();
        out.rows.row_mut(position).assign(row);
        out.check_finite()?;
        Ok(out)
    }

    pub fn pooled(&self) -> Option<&Array1<f64>> {
        self.pooled.as_ref()
    }

    pub fn source_prompt(&self) -> &str {
        &self.source_prompt
    }
}

/// A merged entity embedding: the noun row plus all attribute rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeToken {
    /// The merged row `noun + sum(attributes)`.
    pub embedding: Array1<f64>,
    /// 1-based entity index.
    pub entity_index: usize,
    pub noun_span: TokenSpan,
    pub attribute_spans: Vec<TokenSpan>,
    /// Row position in the post-surgery matrix; `None` before surgery.
    pub position: Option<usize>,
    pub trainable: bool,
}

/// Outcome of [`apply_surgery`].
#[derive(Debug, Clone)]
pub struct SurgeryResult {
    /// Compacted, re-padded conditioning with composite rows in place.
    pub matrix: EmbeddingMatrix,
    pub composites: Vec<CompositeToken>,
    /// Old position -> new position; `None` for dropped positions.
    pub index_map: Vec<Option<usize>>,
    pub ets_applied: bool,
}

fn span_in_range(span: &TokenSpan, lo: usize, hi: usize) -> Result<(), EmbedError> {
    if span.start < lo || span.end > hi || span.start >= span.end {
        return Err(EmbedError::SpanOutOfRange {
            start: span.start,
            end: span.end,
            lo,
            hi,
        });
    }
    Ok(())
}

/// Fuses one entity group into its composite token: the sum of the noun
/// rows followed by the attribute rows, spans left to right.
pub fn merge_group(
    matrix: &EmbeddingMatrix,
    group: &EntityGroup,
) -> Result<CompositeToken, EmbedError> {
    let (lo, hi) = (1, matrix.eot_start());
    let mut embedding = Array1::zeros(matrix.width());
    span_in_range(&group.noun, lo, hi)?;
    for p in group.noun.start..group.noun.end {
        embedding += &matrix.row(p);
    }
    let mut attrs: Vec<&TokenSpan> = group.attributes.iter().collect();
    attrs.sort_by_key(|s| s.start);
    for span in attrs {
        span_in_range(span, lo, hi)?;
        for p in span.start..span.end {
            embedding += &matrix.row(p);
        }
    }
    Ok(CompositeToken {
        embedding,
        entity_index: group.index,
        noun_span: group.noun.clone(),
        attribute_spans: group.attributes.clone(),
        position: None,
        trainable: true,
    })
}

/// Replaces the EOT block of `matrix` with the EOT rows of `clean`
/// (shift-aligned: the j-th EOT row of `matrix` takes the j-th EOT row of
/// `clean`, repeating the final row when `clean` has fewer). Optionally
/// swaps in the clean pooled embedding. Idempotent for a fixed `clean`.
pub fn substitute_eot(
    matrix: &EmbeddingMatrix,
    clean: &EmbeddingMatrix,
    replace_pooled: bool,
) -> Result<EmbeddingMatrix, EmbedError> {
    if matrix.rows.dim() != clean.rows.dim() {
        return Err(EmbedError::ShapeMismatch {
            left: matrix.rows.dim(),
            right: clean.rows.dim(),
        });
    }
    let m = matrix.seq_len();
    let mut rows = matrix.rows.clone();
    for (j, p) in (matrix.eot_start()..m).enumerate() {
        let src = (clean.eot_start() + j).min(m - 1);
        rows.row_mut(p).assign(&clean.row(src));
    }
    let pooled = if replace_pooled {
        clean.pooled.clone()
    } else {
        matrix.pooled.clone()
    };
    Ok(EmbeddingMatrix::assemble(
        rows,
        matrix.eot_start,
        pooled,
        matrix.source_prompt.clone(),
    ))
}

/// Surgery toggles beyond the headline `ets` flag.
#[derive(Debug, Clone, Copy)]
pub struct SurgeryOptions {
    /// Replace the EOT block with the clean prompt's EOT block.
    pub ets: bool,
    /// Under ETS, also replace the pooled embedding with the clean one.
    pub replace_pooled: bool,
}

impl SurgeryOptions {
    pub fn new(ets: bool) -> Self {
        Self {
            ets,
            replace_pooled: true,
        }
    }
}

/// Replaces each entity group by its composite row (at the noun's
/// relative order), compacts the sequence, re-pads to the original length
/// and optionally substitutes the EOT block from the clean prompt.
pub fn apply_surgery(
    matrix: &EmbeddingMatrix,
    parsed: &ParsedPrompt,
    ets: bool,
    encoder: &dyn TextEncoder,
) -> Result<SurgeryResult, EmbedError> {
    apply_surgery_with(matrix, parsed, SurgeryOptions::new(ets), encoder)
}

pub fn apply_surgery_with(
    matrix: &EmbeddingMatrix,
    parsed: &ParsedPrompt,
    options: SurgeryOptions,
    encoder: &dyn TextEncoder,
) -> Result<SurgeryResult, EmbedError> {
    if parsed.prompt != matrix.source_prompt {
        return Err(EmbedError::PromptMismatch {
            parsed: parsed.prompt.clone(),
            matrix: matrix.source_prompt.clone(),
        });
    }
    let m = matrix.seq_len();
    let mut composites: Vec<CompositeToken> = parsed
        .groups
        .iter()
        .map(|g| merge_group(matrix, g))
        .collect::<Result<_, _>>()?;

    let mut rows = Array2::zeros((m, matrix.width()));
    let mut index_map: Vec<Option<usize>> = vec![None; m];
    let mut next = 0usize;

    rows.row_mut(next).assign(&matrix.row(0));
    index_map[0] = Some(next);
    next += 1;
    for p in matrix.content_range() {
        if let Some(c) = composites.iter_mut().find(|c| c.noun_span.start == p) {
            c.position = Some(next);
            rows.row_mut(next).assign(&c.embedding);
            index_map[p] = Some(next);
            next += 1;
        } else if parsed.groups.iter().any(|g| g.spans().any(|s| s.contains(p))) {
            // absorbed into a composite
        } else {
            rows.row_mut(next).assign(&matrix.row(p));
            index_map[p] = Some(next);
            next += 1;
        }
    }
    let new_eot_start = next;
    for p in matrix.eot_start()..m {
        rows.row_mut(next).assign(&matrix.row(p));
        index_map[p] = Some(next);
        next += 1;
    }
    while next < m {
        // freed tail positions take the final EOT row
        rows.row_mut(next).assign(&matrix.row(m - 1));
        next += 1;
    }

    let mut result = EmbeddingMatrix::assemble(
        rows,
        new_eot_start,
        matrix.pooled.clone(),
        matrix.source_prompt.clone(),
    );
    if options.ets {
        let clean = encoder.encode(&clean_prompt(parsed))?;
        result = substitute_eot(&result, &clean, options.replace_pooled)?;
    }
    Ok(SurgeryResult {
        matrix: result,
        composites,
        index_map,
        ets_applied: options.ets,
    })
}

/// Pass-through "surgery" whose trainable rows are the original noun
/// rows. This is how the optimizer runs without token merging (losses
/// apply their gradients to the unmerged noun embeddings).
pub fn noun_row_composites(
    matrix: &EmbeddingMatrix,
    parsed: &ParsedPrompt,
) -> Result<SurgeryResult, EmbedError> {
    if parsed.prompt != matrix.source_prompt {
        return Err(EmbedError::PromptMismatch {
            parsed: parsed.prompt.clone(),
            matrix: matrix.source_prompt.clone(),
        });
    }
    let composites = parsed
        .groups
        .iter()
        .map(|g| {
            span_in_range(&g.noun, 1, matrix.eot_start())?;
            Ok(CompositeToken {
                embedding: matrix.row(g.noun.start).to_owned(),
                entity_index: g.index,
                noun_span: g.noun.clone(),
                attribute_spans: g.attributes.clone(),
                position: Some(g.noun.start),
                trainable: true,
            })
        })
        .collect::<Result<Vec<_>, EmbedError>>()?;
    Ok(SurgeryResult {
        matrix: matrix.clone(),
        composites,
        index_map: (0..matrix.seq_len()).map(Some).collect(),
        ets_applied: false,
    })
}

/// Returns the rows `range` of the conditioning as a reduced sequence
/// (no re-padding): single-token and EOT-only conditionings for the
/// information-coupling experiments.
pub fn slice_conditioning(
    matrix: &EmbeddingMatrix,
    range: std::ops::Range<usize>,
) -> Result<EmbeddingMatrix, EmbedError> {
    if range.start >= range.end || range.end > matrix.seq_len() {
        return Err(EmbedError::SpanOutOfRange {
            start: range.start,
            end: range.end,
            lo: 0,
            hi: matrix.seq_len(),
        });
    }
    let rows = matrix.rows.slice(s![range.clone(), ..]).to_owned();
    let len = rows.nrows();
    let eot_start = matrix.eot_start().saturating_sub(range.start).min(len);
    Ok(EmbeddingMatrix::assemble(
        rows,
        eot_start,
        matrix.pooled.clone(),
        matrix.source_prompt.clone(),
    ))
}

/// Sign of the second operand in [`combine`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Add,
    Subtract,
}

/// Splices two conditionings: rows before `from_index` come from `a`,
/// rows at and after it are `a + b` (or `a - b`), element-wise. This is
/// the additivity construction used to add or remove objects.
pub fn combine(
    a: &EmbeddingMatrix,
    b: &EmbeddingMatrix,
    from_index: usize,
    sign: Sign,
) -> Result<EmbeddingMatrix, EmbedError> {
    if a.rows.dim() != b.rows.dim() {
        return Err(EmbedError::ShapeMismatch {
            left: a.rows.dim(),
            right: b.rows.dim(),
        });
    }
    let m = a.seq_len();
    if from_index < 1 || from_index >= m {
        return Err(EmbedError::SpanOutOfRange {
            start: from_index,
            end: from_index + 1,
            lo: 1,
            hi: m,
        });
    }
    let mut rows = a.rows.clone();
    let factor = match sign {
        Sign::Add => 1.0,
        Sign::Subtract => -1.0,
    };
    {
        let mut tail = rows.slice_mut(s![from_index.., ..]);
        tail += &(&b.rows.slice(s![from_index.., ..]) * factor);
    }
    Ok(EmbeddingMatrix::assemble(
        rows,
        a.eot_start,
        a.pooled.clone(),
        a.source_prompt.clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{parse_prompt, HeuristicProvider};
    use crate::token::WordTokenizer;
    use crate::DEFAULT_SEQ_LEN;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn enc() -> StubTextEncoder {
        StubTextEncoder::default()
    }

    fn parse(prompt: &str) -> ParsedPrompt {
        parse_prompt(prompt, &HeuristicProvider, &WordTokenizer, DEFAULT_SEQ_LEN).unwrap()
    }

    /// Independent oracle: sum the same rows in reversed span order.
    fn merge_oracle(matrix: &EmbeddingMatrix, group: &EntityGroup) -> Array1<f64> {
        let mut spans: Vec<&TokenSpan> = group.spans().collect();
        spans.sort_by_key(|s| std::cmp::Reverse(s.start));
        let mut acc = Array1::zeros(matrix.width());
        for span in spans {
            for p in (span.start..span.end).rev() {
                acc += &matrix.row(p);
            }
        }
        acc
    }

    fn rel_close(a: &Array1<f64>, b: &Array1<f64>, tol: f64) -> bool {
        let num: f64 = (a - b).iter().map(|v| v * v).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        num / den <= tol
    }

    #[test]
    fn merge_without_attributes_is_the_noun_row() {
        let m = enc().encode("a dog").unwrap();
        let parsed = parse("a dog");
        let c = merge_group(&m, &parsed.groups[0]).unwrap();
        assert_eq!(c.embedding, m.row(parsed.groups[0].noun.start).to_owned());
    }

    #[test]
    fn merge_is_the_exact_row_sum() {
        let m = enc().encode("a cat wearing glasses and a dog with a hat").unwrap();
        let parsed = parse("a cat wearing glasses and a dog with a hat");
        let g = &parsed.groups[1]; // dog + {with, a, hat}
        let c = merge_group(&m, g).unwrap();
        let expected = m.row(7).to_owned() + m.row(8).to_owned() + m.row(9).to_owned()
            + m.row(10).to_owned();
        assert!(rel_close(&c.embedding, &expected, 1e-12));
        assert!(rel_close(&c.embedding, &merge_oracle(&m, g), 1e-5));
    }

    #[test]
    fn merge_matches_reorder_oracle_on_random_groups() {
        let encoder = enc();
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let words = ["dog", "cat", "hat", "red", "ball", "cube", "glasses", "box"];
        for _ in 0..50 {
            let n = rng.random_range(2..8);
            let prompt: Vec<&str> = (0..n)
                .map(|_| words[rng.random_range(0..words.len())])
                .collect();
            let prompt = prompt.join(" ");
            let m = encoder.encode(&prompt).unwrap();
            // random disjoint spans inside the content range
            let mut cut = rng.random_range(1..=n);
            let noun = TokenSpan { start: 1, end: 1 + cut, text: String::new() };
            let mut attrs = Vec::new();
            while cut < n && rng.random::<f64>() < 0.7 {
                let len = rng.random_range(1..=(n - cut));
                attrs.push(TokenSpan {
                    start: 1 + cut,
                    end: 1 + cut + len,
                    text: String::new(),
                });
                cut += len;
            }
            let group = EntityGroup { noun, attributes: attrs, index: 1 };
            let c = merge_group(&m, &group).unwrap();
            assert!(rel_close(&c.embedding, &merge_oracle(&m, &group), 1e-5));
        }
    }

    #[test]
    fn merge_rejects_out_of_range_spans() {
        let m = enc().encode("a dog").unwrap();
        let group = EntityGroup {
            noun: TokenSpan { start: 5, end: 6, text: "ghost".into() },
            attributes: vec![],
            index: 1,
        };
        assert!(matches!(
            merge_group(&m, &group),
            Err(EmbedError::SpanOutOfRange { .. })
        ));
    }

    #[test]
    fn surgery_compacts_to_composite_rows() {
        let encoder = enc();
        let prompt = "a dog with a hat";
        let m = encoder.encode(prompt).unwrap();
        let parsed = parse(prompt);
        let r = apply_surgery(&m, &parsed, false, &encoder).unwrap();
        // content was [a, dog, with, a, hat]; it becomes [a, dog*]
        assert_eq!(r.matrix.eot_start(), 3);
        assert_eq!(r.matrix.seq_len(), DEFAULT_SEQ_LEN);
        let c = &r.composites[0];
        assert_eq!(c.position, Some(2));
        assert_eq!(r.matrix.row(2).to_owned(), c.embedding);
        // the determiner survives
        assert_eq!(r.matrix.row(1), m.row(1));
        // index_map: kept positions stay ordered, absorbed ones drop
        assert_eq!(r.index_map[0], Some(0));
        assert_eq!(r.index_map[1], Some(1));
        assert_eq!(r.index_map[2], Some(2));
        assert_eq!(r.index_map[3], None);
        assert_eq!(r.index_map[5], None);
        assert_eq!(r.index_map[6], Some(3)); // first EOT row shifts left
    }

    #[test]
    fn surgery_without_attributes_is_identity() {
        let encoder = enc();
        let m = encoder.encode("a dog").unwrap();
        let parsed = parse("a dog");
        let r = apply_surgery(&m, &parsed, false, &encoder).unwrap();
        assert_eq!(r.matrix.rows(), m.rows());
        assert_eq!(r.matrix.eot_start(), m.eot_start());
        let identity: Vec<Option<usize>> = (0..m.seq_len()).map(Some).collect();
        assert_eq!(r.index_map, identity);
    }

    #[test]
    fn surgery_preserves_shape_and_compaction_arithmetic() {
        let encoder = enc();
        for prompt in [
            "a cat wearing glasses and a dog with a hat",
            "a red ball and a blue cube",
            "a boy wearing hat and a dog wearing sunglasses",
            "a dog",
        ] {
            let m = encoder.encode(prompt).unwrap();
            let parsed = parse(prompt);
            let r = apply_surgery(&m, &parsed, false, &encoder).unwrap();
            assert_eq!(r.matrix.seq_len(), DEFAULT_SEQ_LEN);
            assert_eq!(r.matrix.width(), encoder.width());
            let merged: usize = parsed.groups.iter().map(|g| g.token_count() - 1).sum();
            assert_eq!(
                r.matrix.eot_start(),
                m.eot_start() - merged,
                "compaction arithmetic for {prompt:?}"
            );
            // index_map injective on survivors
            let mut seen = std::collections::HashSet::new();
            for dst in r.index_map.iter().flatten() {
                assert!(seen.insert(*dst), "index_map not injective");
            }
        }
    }

    #[test]
    fn ets_matches_clean_prompt_eot_block() {
        let encoder = enc();
        let prompt = "a cat wearing hat and a dog wearing sunglasses";
        let m = encoder.encode(prompt).unwrap();
        let parsed = parse(prompt);
        let r = apply_surgery(&m, &parsed, true, &encoder).unwrap();
        assert!(r.ets_applied);
        let clean = encoder.encode("a cat and a dog").unwrap();
        assert_eq!(r.matrix.eot_start(), clean.eot_start());
        for p in r.matrix.eot_start()..r.matrix.seq_len() {
            assert_eq!(r.matrix.row(p), clean.row(p), "EOT row {p}");
        }
        // pooled embedding follows the clean prompt by default
        assert_eq!(r.matrix.pooled(), clean.pooled());
    }

    #[test]
    fn ets_is_idempotent_bit_for_bit() {
        let encoder = enc();
        let m = encoder.encode("a dog with a hat").unwrap();
        let clean = encoder.encode("a dog").unwrap();
        let once = substitute_eot(&m, &clean, true).unwrap();
        let twice = substitute_eot(&once, &clean, true).unwrap();
        let bits = |m: &EmbeddingMatrix| -> Vec<u64> {
            m.rows().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&once), bits(&twice));
    }

    #[test]
    fn ets_handles_clean_prompt_longer_than_compacted_content() {
        let encoder = enc();
        // "dog with hat" compacts to [dog*] (no determiner in residual),
        // while the clean prompt "a dog" has two content tokens.
        let prompt = "dog with hat";
        let m = encoder.encode(prompt).unwrap();
        let parsed = parse(prompt);
        let r = apply_surgery(&m, &parsed, true, &encoder).unwrap();
        assert_eq!(r.matrix.eot_start(), 2);
        let clean = encoder.encode("a dog").unwrap();
        // first substituted row is clean's first EOT row, shift-aligned
        assert_eq!(r.matrix.row(2), clean.row(clean.eot_start()));
    }

    #[test]
    fn noun_row_composites_have_identity_layout() {
        let encoder = enc();
        let prompt = "a red ball and a blue cube";
        let m = encoder.encode(prompt).unwrap();
        let parsed = parse(prompt);
        let r = noun_row_composites(&m, &parsed).unwrap();
        assert_eq!(r.matrix.rows(), m.rows());
        assert_eq!(r.composites.len(), 2);
        assert_eq!(r.composites[0].position, Some(parsed.groups[0].noun.start));
        assert_eq!(
            r.composites[0].embedding,
            m.row(parsed.groups[0].noun.start).to_owned()
        );
    }

    #[test]
    fn slice_single_token_and_eot_block() {
        let encoder = enc();
        let m = encoder.encode("a cat wearing sunglasses and a dog wearing a hat").unwrap();
        assert_eq!(m.eot_start(), 11);
        // "dog" sits at position 7 of the padded sequence
        let dog = slice_conditioning(&m, 7..8).unwrap();
        assert_eq!(dog.seq_len(), 1);
        assert_eq!(dog.row(0), m.row(7));
        let eot = slice_conditioning(&m, m.eot_start()..m.seq_len()).unwrap();
        assert_eq!(eot.seq_len(), DEFAULT_SEQ_LEN - m.eot_start());
        let full = slice_conditioning(&m, 0..m.seq_len()).unwrap();
        assert_eq!(full.rows(), m.rows());
        assert_eq!(full.eot_start(), m.eot_start());
        assert!(slice_conditioning(&m, 5..100).is_err());
    }

    #[test]
    fn combine_with_zero_is_identity() {
        let encoder = enc();
        let m = encoder.encode("a photo of a dog").unwrap();
        let z = EmbeddingMatrix::zeros(m.seq_len(), m.width());
        let c = combine(&m, &z, 5, Sign::Add).unwrap();
        assert_eq!(c.rows(), m.rows());
        assert_eq!(c.eot_start(), m.eot_start());
    }

    #[test]
    fn combine_adds_only_from_index() {
        let encoder = enc();
        let a = encoder.encode("a photo of a dog").unwrap();
        let b = encoder.encode("a photo of a hat").unwrap();
        let c = combine(&a, &b, 5, Sign::Add).unwrap();
        for p in 0..5 {
            assert_eq!(c.row(p), a.row(p));
        }
        for p in 5..a.seq_len() {
            let expect = a.row(p).to_owned() + b.row(p).to_owned();
            assert_eq!(c.row(p).to_owned(), expect);
        }
        let d = combine(&a, &b, 5, Sign::Subtract).unwrap();
        let expect = a.row(5).to_owned() - b.row(5).to_owned();
        assert_eq!(d.row(5).to_owned(), expect);
    }

    #[test]
    fn combine_rejects_shape_mismatch() {
        let a = enc().encode("a dog").unwrap();
        let b = EmbeddingMatrix::zeros(10, 4);
        assert!(matches!(
            combine(&a, &b, 2, Sign::Add),
            Err(EmbedError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn surgery_rejects_foreign_parse() {
        let encoder = enc();
        let m = encoder.encode("a dog").unwrap();
        let parsed = parse("a cat");
        assert!(matches!(
            apply_surgery(&m, &parsed, false, &encoder),
            Err(EmbedError::PromptMismatch { .. })
        ));
    }

    #[test]
    fn operations_do_not_mutate_inputs() {
        let encoder = enc();
        let prompt = "a cat wearing glasses and a dog with a hat";
        let m = encoder.encode(prompt).unwrap();
        let before = m.clone();
        let parsed = parse(prompt);
        let _ = merge_group(&m, &parsed.groups[0]).unwrap();
        let _ = apply_surgery(&m, &parsed, true, &encoder).unwrap();
        let _ = slice_conditioning(&m, 1..4).unwrap();
        let _ = combine(&m, &EmbeddingMatrix::zeros(m.seq_len(), m.width()), 2, Sign::Add);
        assert_eq!(m, before);
    }
}
