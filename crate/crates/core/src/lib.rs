//! Token merging for semantic binding in text-to-image diffusion.
//!
//! The crate turns a prompt into entity/attribute groups, fuses each group
//! into a single composite embedding row (`c = noun + sum of attributes`),
//! optionally substitutes the end-of-text rows with those of an
//! attribute-stripped clean prompt, and refines the composite rows during
//! the early denoising window with an entropy loss over their
//! cross-attention maps plus a semantic binding loss against per-entity
//! supervision encodings.
//!
//! Model access goes through two adapter contracts: [`embed::TextEncoder`]
//! for the conditioning matrix and [`adapter::DenoiserAdapter`] for noise
//! prediction, attention capture, scheduling and decoding. Deterministic
//! stub implementations back the test suite; HTTP bindings in [`remote`]
//! attach a real latent-diffusion stack running as a sidecar process.

pub mod adapter;
pub mod embed;
pub mod eval;
pub mod optim;
pub mod pipeline;
pub mod probe;
pub mod prompt;
pub mod remote;
pub mod token;

/// Padded text-conditioning sequence length used unless configured otherwise.
pub const DEFAULT_SEQ_LEN: usize = 77;
