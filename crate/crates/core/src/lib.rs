//! DAG-based non-autoregressive text generation at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`vocab`], [`dag`], [`rng`]: shared vocabulary, token sequences, the
//!   per-sample DAG container and the portable seeded generator.
//! * [`loss`]: alignment-marginalising DAG loss, its gradient, fragment-wise
//!   loss, constrained Viterbi alignment and brute-force oracles, plus the
//!   token-level cross-entropy and CTC variants.
//! * [`dsti`]: double-source text infilling data construction.
//! * [`model`]: a tiny encoder-decoder with hand-rolled reverse-mode autodiff.
//! * [`decode`]: lookahead, greedy, beam search with n-gram LM fusion and
//!   nucleus sampling over a DAG.
//! * [`pipeline`]: overlapped two-stage decoding executor and benchmark.
//! * [`metrics`]: corpus BLEU, distinct-n and position-bucketed accuracy.
//! * [`synth`]: synthetic paired-data generators.
//!
//! Batch-level work goes through [`exec::Exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to a plain loop otherwise.

pub mod dag;
pub mod decode;
pub mod dsti;
pub mod error;
pub mod exec;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod vocab;

pub use dag::DagParams;
pub use error::{Error, Result};
pub use exec::Exec;
pub use vocab::{TokenSeq, Vocab};
