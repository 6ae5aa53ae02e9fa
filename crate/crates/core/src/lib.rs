//! Compresses multi-source user embeddings into short discrete token
//! sequences with a residual-quantized autoencoder that has shared and
//! per-source codebooks.
//!
//! Pipeline:
//!
//! 1. [`embed`]: per-source user embeddings (from a provider, a `UQTE`
//!    file, or the synthetic generator).
//! 2. [`mrqvae`]: pooling + projection, encoder, two-stage residual
//!    quantization over a [`codebook::CodebookStack`], per-source decoders.
//! 3. [`tokenizer`]: code paths → token ids, engagement-ranked collision
//!    tokens, token files.
//! 4. [`align`]: contrastive alignment of fused token embeddings with
//!    behavior-text embeddings.
//! 5. [`eval`]: AUC / KS / HR@K, linear probes, utilization reports.

pub mod align;
pub mod codebook;
pub mod embed;
pub mod eval;
pub mod error;
pub mod mrqvae;
pub mod ndmath;
pub mod tensorfile;
pub mod tokenizer;

pub use error::{Error, Result};
