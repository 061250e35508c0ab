//! memloc: locate the neurons responsible for memorized sequences in small
//! decoder-only language models, and measure how well different attribution
//! methods find them.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`graph`], [`rng`] — dense f64 tensors, reverse-mode autodiff,
//!   and the deterministic PRNG everything draws from.
//! * [`model`] — a small pre-norm transformer LM, its training loop, sequence
//!   scoring, neuron dropout, and a binary checkpoint format.
//! * [`text`], [`corpus`] — byte-level tokenization, edit distance, n-gram
//!   de-duplication, the synthetic corpus generator, and the memorized-sequence
//!   collector.
//! * [`attrib`] — the attribution methods (Zero-Out, Activations, Integrated
//!   Gradients, Slimming, Hard Concrete, Random) and top-k neuron selection.
//! * [`inject`], [`deletion`] — the two benchmarks: recall of injected weights,
//!   and the effect of deleting predicted neurons.
//! * [`stats`], [`report`], [`runcfg`] — significance tests, artifact writers,
//!   and the run configuration shared with the CLI.
//!
//! Everything is deterministic given a seed: parallel and sequential runs of the
//! same configuration produce byte-identical artifacts.

pub mod attrib;
pub mod corpus;
pub mod deletion;
pub mod graph;
pub mod inject;
pub mod math;
pub mod model;
pub mod par;
pub mod report;
pub mod rng;
pub mod runcfg;
pub mod stats;
pub mod tensor;
pub mod text;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("autodiff error: {0}")]
    Autodiff(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("stats error: {0}")]
    Stats(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
