//! Numeric-modality encoding for small autoregressive sequence models.
//!
//! Numbers enter the model as dedicated continuous embeddings produced by a
//! number projector and leave it through a scalar regression head, instead of
//! being spelled out digit by digit. The crate bundles the text/number
//! alignment pipeline, a small f64 autodiff engine, a compact causal
//! transformer with dual output heads, training and generation loops, the
//! evaluation metrics, and a deterministic synthetic dialogue generator used
//! to compare the encoding strategies.

pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod genloop;
pub mod gradcore;
pub mod numtext;
pub mod parallel;
pub mod seqmodel;
pub mod synthdrive;
pub mod trainer;

pub use error::{Error, Result};
