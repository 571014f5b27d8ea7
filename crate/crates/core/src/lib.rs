//! Mandarin-to-dialect translation frontend: a non-autoregressive
//! transformer translator with multibranch attention, glancing training and
//! alignment supervision, built on a small reverse-mode autodiff engine,
//! plus the surrounding TTS frontend pipeline, IBM Model 1 aligner, BLEU and
//! latency tooling, and a synthetic corpus generator.

pub mod aligner;
pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod guard;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod text;
pub mod training;

pub use error::{Error, Result};
