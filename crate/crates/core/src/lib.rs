//! Dual-fusion multimodal learning over whole-slide patch embeddings and
//! omic profiles.
//!
//! Omic vectors are encoded by a self-normalizing network and fused into
//! every patch embedding (early fusion). Gated attention pools the fused
//! patches into a slide embedding, which is combined with the omic embedding
//! again by the outer arithmetic block (late fusion) before a subtyping or
//! discrete-time survival head.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod numeric;
pub mod survival;

pub use error::{Error, Result};
