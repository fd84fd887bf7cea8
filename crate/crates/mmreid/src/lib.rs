//! Desk-scale multimodal person re-identification.
//!
//! Two-stage pipeline over synthetic person crops: stage one continues an
//! instruction-tuned language model against image latents, stage two
//! fine-tunes the visual encoder for retrieval with identity and batch-hard
//! triplet losses, optionally keeping the language term in the mix. All
//! numerics run on a small reverse-mode tape in f64; nothing here depends
//! on an ML framework.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod synthdata;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
