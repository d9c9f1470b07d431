//! Continual knowledge updates for a miniature seq2seq transformer.
//!
//! The crate trains a small encoder-decoder model on relational question/answer
//! pairs, then teaches it new or corrected facts without touching the base
//! weights: each update phase trains a low-rank plug-in module plus an
//! embedding memory of the questions it covers.  At inference a selector
//! compares the incoming question against the stored memories and switches the
//! matching plug-in on — or leaves the base model untouched when nothing is
//! close enough.
//!
//! Layout:
//! - [`tensor`]: flat `f64` tensors, the autodiff tape, and the Adam optimizer
//! - [`model`]: the transformer itself (embeddings, attention, greedy decoding)
//! - [`adapters`]: low-rank and bottleneck plug-in modules wrapped around base weights
//! - [`selector`]: embedding memories and the nearest-neighbor gate
//! - [`world`]: synthetic relational-fact world and question generation
//! - [`train`]: pretraining plus the four update regimes
//! - [`eval`]: exact-match scoring, forgetting/update ratios, confusion analysis
//! - [`checkpoint`] / [`config`] / [`manifest`]: on-disk artifacts
//! - [`runner`]: the stage pipeline behind the CLI

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod runner;
pub mod selector;
pub mod tensor;
pub mod train;
pub mod vocab;
pub mod world;

pub use error::{Error, Result};
