//! Desk-scale, self-contained pipeline for knowledge-grounded meme abuse
//! classification: gazetteer entity linking against local knowledge
//! snapshots, gated cross-attention knowledge fusion, low-rank contrastive
//! fine-tuning, and deterministic templated explanations, plus the
//! train / predict / explain / eval / perturb harness around it.

pub mod adaptation;
pub mod attention;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod knowledge;
pub mod numerics;
pub mod pipeline;
pub mod reasoning;

pub use error::{Error, Result};
