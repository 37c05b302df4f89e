//! C ABI over the token-merging core.
//!
//! Opaque handles + status codes; every function catches panics. Strings
//! returned through `char**` are heap-allocated and must be released with
//! `tome_string_free`; handles have matching `_free` functions. The
//! header is generated into `include/tome.h` at build time.

use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use tome_core::embed::{
    apply_surgery, EmbeddingMatrix, StubTextEncoder, SurgeryResult, TextEncoder,
};
use tome_core::eval::benchmark::render_template;
use tome_core::optim::optimized_step_count;
use tome_core::probe::{normalize, token_entropy, AttentionMap, LayerId, MapMeta};
use tome_core::prompt::{clean_prompt, noun_phrase, parse_prompt, HeuristicProvider, ParsedPrompt};

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToMeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ParseFailed = 3,
    EncodeFailed = 4,
    SurgeryFailed = 5,
    OutOfRange = 6,
    InvalidArgument = 7,
    Panicked = 8,
}

/// Owns the deterministic encoder and parse provider behind the API.
pub struct ToMeSession {
    encoder: StubTextEncoder,
    provider: HeuristicProvider,
}

/// Parsed prompt handle.
pub struct ToMeParse {
    parsed: ParsedPrompt,
}

/// Conditioning matrix handle.
pub struct ToMeEmbedding {
    matrix: EmbeddingMatrix,
}

/// Surgery result handle.
pub struct ToMeSurgery {
    result: SurgeryResult,
}

fn guarded<F: FnOnce() -> ToMeStatus>(f: F) -> ToMeStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(ToMeStatus::Panicked)
}

/// # Safety
/// `s` must be a valid NUL-terminated string or NULL.
unsafe fn cstr<'a>(s: *const c_char) -> Result<&'a str, ToMeStatus> {
    if s.is_null() {
        return Err(ToMeStatus::NullPointer);
    }
    CStr::from_ptr(s).to_str().map_err(|_| ToMeStatus::InvalidUtf8)
}

fn out_string(value: String, out: *mut *mut c_char) -> ToMeStatus {
    match CString::new(value) {
        Ok(cs) => {
            unsafe { *out = cs.into_raw() };
            ToMeStatus::Ok
        }
        Err(_) => ToMeStatus::InvalidArgument,
    }
}

/// Creates a session around the deterministic stub encoder
/// (`dim` embedding width, `seq_len` padded length, `seed` weights seed).
///
/// # Safety
/// `out` must be a valid pointer; the returned session must be released
/// with [`tome_session_free`].
#[no_mangle]
pub unsafe extern "C" fn tome_session_new_stub(
    dim: usize,
    seq_len: usize,
    seed: u64,
    out: *mut *mut ToMeSession,
) -> ToMeStatus {
    guarded(|| {
        if out.is_null() {
            return ToMeStatus::NullPointer;
        }
        if dim < 4 || seq_len < 3 {
            return ToMeStatus::InvalidArgument;
        }
        let session = Box::new(ToMeSession {
            encoder: StubTextEncoder::new(dim, seq_len, seed),
            provider: HeuristicProvider,
        });
        *out = Box::into_raw(session);
        ToMeStatus::Ok
    })
}

/// # Safety
/// `session` must come from [`tome_session_new_stub`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tome_session_free(session: *mut ToMeSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Parses a prompt into entity/attribute groups.
///
/// # Safety
/// `session` and `out` must be valid; `prompt` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tome_parse(
    session: *const ToMeSession,
    prompt: *const c_char,
    out: *mut *mut ToMeParse,
) -> ToMeStatus {
    guarded(|| {
        if session.is_null() || out.is_null() {
            return ToMeStatus::NullPointer;
        }
        let prompt = match cstr(prompt) {
            Ok(p) => p,
            Err(status) => return status,
        };
        let session = &*session;
        match parse_prompt(
            prompt,
            &session.provider,
            session.encoder.tokenizer(),
            session.encoder.seq_len(),
        ) {
            Ok(parsed) => {
                *out = Box::into_raw(Box::new(ToMeParse { parsed }));
                ToMeStatus::Ok
            }
            Err(_) => ToMeStatus::ParseFailed,
        }
    })
}

/// # Safety
/// `parse` must come from [`tome_parse`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tome_parse_free(parse: *mut ToMeParse) {
    if !parse.is_null() {
        drop(Box::from_raw(parse));
    }
}

/// Number of entity groups in the parse; 0 for NULL.
///
/// # Safety
/// `parse` must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn tome_parse_group_count(parse: *const ToMeParse) -> usize {
    if parse.is_null() {
        return 0;
    }
    (*parse).parsed.groups.len()
}

/// Number of content tokens covered by the parse; 0 for NULL.
///
/// # Safety
/// `parse` must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn tome_parse_token_count(parse: *const ToMeParse) -> usize {
    if parse.is_null() {
        return 0;
    }
    (*parse).parsed.token_count
}

/// Surface text of entity `k`'s noun head (1-based).
///
/// # Safety
/// `parse` and `out` must be valid; free the string with
/// [`tome_string_free`].
#[no_mangle]
pub unsafe extern "C" fn tome_parse_noun(
    parse: *const ToMeParse,
    entity_index: usize,
    out: *mut *mut c_char,
) -> ToMeStatus {
    guarded(|| {
        if parse.is_null() || out.is_null() {
            return ToMeStatus::NullPointer;
        }
        match (*parse)
            .parsed
            .groups
            .iter()
            .find(|g| g.index == entity_index)
        {
            Some(group) => out_string(group.noun.text.clone(), out),
            None => ToMeStatus::OutOfRange,
        }
    })
}

/// Attribute-stripped clean prompt ("a cat and a dog").
///
/// # Safety
/// `parse` and `out` must be valid; free the string with
/// [`tome_string_free`].
#[no_mangle]
pub unsafe extern "C" fn tome_parse_clean_prompt(
    parse: *const ToMeParse,
    out: *mut *mut c_char,
) -> ToMeStatus {
    guarded(|| {
        if parse.is_null() || out.is_null() {
            return ToMeStatus::NullPointer;
        }
        out_string(clean_prompt(&(*parse).parsed), out)
    })
}

/// Supervision noun phrase of entity `k` ("a dog with a hat").
///
/// # Safety
/// `parse` and `out` must be valid; free the string with
/// [`tome_string_free`].
#[no_mangle]
pub unsafe extern "C" fn tome_parse_noun_phrase(
    parse: *const ToMeParse,
    entity_index: usize,
    out: *mut *mut c_char,
) -> ToMeStatus {
    guarded(|| {
        if parse.is_null() || out.is_null() {
            return ToMeStatus::NullPointer;
        }
        match noun_phrase(&(*parse).parsed, entity_index) {
            Some(phrase) => out_string(phrase, out),
            None => ToMeStatus::OutOfRange,
        }
    })
}

/// Encodes a prompt into the padded conditioning matrix.
///
/// # Safety
/// `session` and `out` must be valid; `prompt` NUL-terminated. Release
/// the handle with [`tome_embedding_free`].
#[no_mangle]
pub unsafe extern "C" fn tome_encode(
    session: *const ToMeSession,
    prompt: *const c_char,
    out: *mut *mut ToMeEmbedding,
) -> ToMeStatus {
    guarded(|| {
        if session.is_null() || out.is_null() {
            return ToMeStatus::NullPointer;
        }
        let prompt = match cstr(prompt) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match (*session).encoder.encode(prompt) {
            Ok(matrix) => {
                *out = Box::into_raw(Box::new(ToMeEmbedding { matrix }));
                ToMeStatus::Ok
            }
            Err(_) => ToMeStatus::EncodeFailed,
        }
    })
}

/// # Safety
/// `embedding` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tome_embedding_free(embedding: *mut ToMeEmbedding) {
    if !embedding.is_null() {
        drop(Box::from_raw(embedding));
    }
}

/// # Safety
/// `embedding` must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn tome_embedding_rows(embedding: *const ToMeEmbedding) -> usize {
    if embedding.is_null() {
        return 0;
    }
    (*embedding).matrix.seq_len()
}

/// # Safety
/// `embedding` must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn tome_embedding_width(embedding: *const ToMeEmbedding) -> usize {
    if embedding.is_null() {
        return 0;
    }
    (*embedding).matrix.width()
}

/// First EOT row position.
///
/// # Safety
/// `embedding` must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn tome_embedding_eot_start(embedding: *const ToMeEmbedding) -> usize {
    if embedding.is_null() {
        return 0;
    }
    (*embedding).matrix.eot_start()
}

/// Copies row `position` into `buffer` (`len` must equal the width).
///
/// # Safety
/// `embedding` must be valid; `buffer` must point to at least `len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tome_embedding_copy_row(
    embedding: *const ToMeEmbedding,
    position: usize,
    buffer: *mut f64,
    len: usize,
) -> ToMeStatus {
    guarded(|| {
        if embedding.is_null() || buffer.is_null() {
            return ToMeStatus::NullPointer;
        }
        let matrix = &(*embedding).matrix;
        if position >= matrix.seq_len() || len != matrix.width() {
            return ToMeStatus::OutOfRange;
        }
        let row = matrix.row(position);
        let out = std::slice::from_raw_parts_mut(buffer, len);
        for (dst, src) in out.iter_mut().zip(row.iter()) {
            *dst = *src;
        }
        ToMeStatus::Ok
    })
}

/// Parses, encodes and applies token-merging surgery (with optional
/// end-token substitution) in one call.
///
/// # Safety
/// `session` and `out` must be valid; `prompt` NUL-terminated. Release
/// the handle with [`tome_surgery_free`].
#[no_mangle]
pub unsafe extern "C" fn tome_apply_surgery(
    session: *const ToMeSession,
    prompt: *const c_char,
    ets: bool,
    out: *mut *mut ToMeSurgery,
) -> ToMeStatus {
    guarded(|| {
        if session.is_null() || out.is_null() {
            return ToMeStatus::NullPointer;
        }
        let prompt = match cstr(prompt) {
            Ok(p) => p,
            Err(status) => return status,
        };
        let session = &*session;
        let parsed = match parse_prompt(
            prompt,
            &session.provider,
            session.encoder.tokenizer(),
            session.encoder.seq_len(),
        ) {
            Ok(p) => p,
            Err(_) => return ToMeStatus::ParseFailed,
        };
        let matrix = match session.encoder.encode(prompt) {
            Ok(m) => m,
            Err(_) => return ToMeStatus::EncodeFailed,
        };
        match apply_surgery(&matrix, &parsed, ets, &session.encoder) {
            Ok(result) => {
                *out = Box::into_raw(Box::new(ToMeSurgery { result }));
                ToMeStatus::Ok
            }
            Err(_) => ToMeStatus::SurgeryFailed,
        }
    })
}

/// # Safety
/// `surgery` must come from [`tome_apply_surgery`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tome_surgery_free(surgery: *mut ToMeSurgery) {
    if !surgery.is_null() {
        drop(Box::from_raw(surgery));
    }
}

/// # Safety
/// `surgery` must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn tome_surgery_composite_count(surgery: *const ToMeSurgery) -> usize {
    if surgery.is_null() {
        return 0;
    }
    (*surgery).result.composites.len()
}

/// Post-surgery row position of composite `k` (0-based slot).
///
/// # Safety
/// `surgery` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tome_surgery_composite_position(
    surgery: *const ToMeSurgery,
    slot: usize,
    out: *mut usize,
) -> ToMeStatus {
    guarded(|| {
        if surgery.is_null() || out.is_null() {
            return ToMeStatus::NullPointer;
        }
        match (*surgery)
            .result
            .composites
            .get(slot)
            .and_then(|c| c.position)
        {
            Some(position) => {
                *out = position;
                ToMeStatus::Ok
            }
            None => ToMeStatus::OutOfRange,
        }
    })
}

/// Whether end-token substitution was applied.
///
/// # Safety
/// `surgery` must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn tome_surgery_ets_applied(surgery: *const ToMeSurgery) -> bool {
    !surgery.is_null() && (*surgery).result.ets_applied
}

/// Copies the post-surgery conditioning into a fresh embedding handle.
///
/// # Safety
/// `surgery` and `out` must be valid. Release with
/// [`tome_embedding_free`].
#[no_mangle]
pub unsafe extern "C" fn tome_surgery_matrix(
    surgery: *const ToMeSurgery,
    out: *mut *mut ToMeEmbedding,
) -> ToMeStatus {
    guarded(|| {
        if surgery.is_null() || out.is_null() {
            return ToMeStatus::NullPointer;
        }
        let matrix = (*surgery).result.matrix.clone();
        *out = Box::into_raw(Box::new(ToMeEmbedding { matrix }));
        ToMeStatus::Ok
    })
}

/// Shannon entropy (nats) of a non-negative grid after normalization;
/// rows-by-cols values in row-major order.
///
/// # Safety
/// `values` must point to `rows * cols` readable doubles; `out` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn tome_attention_entropy(
    values: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> ToMeStatus {
    guarded(|| {
        if values.is_null() || out.is_null() {
            return ToMeStatus::NullPointer;
        }
        if rows == 0 || cols == 0 {
            return ToMeStatus::InvalidArgument;
        }
        let data = std::slice::from_raw_parts(values, rows * cols);
        let grid = match ndarray::Array2::from_shape_vec((rows, cols), data.to_vec()) {
            Ok(g) => g,
            Err(_) => return ToMeStatus::InvalidArgument,
        };
        let meta = MapMeta {
            layer: LayerId::new("ffi"),
            token_position: 0,
            timestep: 0,
            head_averaged: true,
        };
        let map = match AttentionMap::new(grid, meta, false) {
            Ok(m) => m,
            Err(_) => return ToMeStatus::InvalidArgument,
        };
        match normalize(&map).and_then(|m| token_entropy(&m)) {
            Ok(h) => {
                *out = h;
                ToMeStatus::Ok
            }
            Err(_) => ToMeStatus::InvalidArgument,
        }
    })
}

/// Number of optimized sampling steps: ceil(fraction * total).
#[no_mangle]
pub extern "C" fn tome_optimized_step_count(t_opt_fraction: f64, total_steps: usize) -> usize {
    optimized_step_count(t_opt_fraction, total_steps)
}

/// Renders the object-binding benchmark template.
///
/// # Safety
/// All strings must be NUL-terminated; `out` must be valid. Free the
/// result with [`tome_string_free`].
#[no_mangle]
pub unsafe extern "C" fn tome_render_benchmark_prompt(
    object_a: *const c_char,
    item_a: *const c_char,
    object_b: *const c_char,
    item_b: *const c_char,
    out: *mut *mut c_char,
) -> ToMeStatus {
    guarded(|| {
        if out.is_null() {
            return ToMeStatus::NullPointer;
        }
        let fields = [object_a, item_a, object_b, item_b].map(|p| cstr(p));
        let mut resolved = Vec::with_capacity(4);
        for field in fields {
            match field {
                Ok(s) if !s.trim().is_empty() => resolved.push(s),
                Ok(_) => return ToMeStatus::InvalidArgument,
                Err(status) => return status,
            }
        }
        out_string(
            render_template(resolved[0], resolved[1], resolved[2], resolved[3]),
            out,
        )
    })
}

/// Releases a string previously returned by this library.
///
/// # Safety
/// `s` must originate from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tome_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
