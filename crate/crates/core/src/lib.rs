//! Desk-scale laboratory for speculative decoding under weight quantization.
//!
//! The crate models the interaction between lossless speculative decoding and
//! weight-only quantization on hardware small enough to reason about exactly:
//!
//! 1. [`quant`] — group-quantized matrices (W4/W8), optional Hadamard
//!    rotation, and matching dense/quantized matrix-vector kernels with a
//!    pinned reduction order.
//! 2. [`engine`] — a tiny decoder-only transformer with a KV cache that
//!    supports tree-shaped batches (explicit position ids + ancestry masks)
//!    and exact cache surgery (`truncate`, `select`).
//! 3. [`draft`] — drafters (n-gram table or a second toy model) and dynamic
//!    draft-tree construction by beam expansion over cumulative log
//!    probability.
//! 4. [`decode`] — greedy autoregressive decoding plus three lossless
//!    speculative strategies (sequence drafting, tree drafting, and a
//!    hierarchical two-stage scheme), with exact acceptance accounting and a
//!    brute-force tau oracle.
//! 5. [`perf`] — a roofline cost model that converts decode event logs into
//!    simulated time and reproduces draft-length/tree-size speedup analysis.
//!
//! Everything is deterministic: fixed seeds, fixed reduction orders, greedy
//! argmax with ties broken toward the lowest token id. Two runs of the same
//! configuration produce bit-identical outputs.

pub mod decode;
pub mod draft;
pub mod engine;
mod error;
pub mod perf;
pub mod quant;
mod rng;

pub use error::{Error, Result};
