//! Core library for a two-stage masked-generative codec-token pipeline.
//!
//! Everything in here is pure computation over heap-allocated `f32`
//! matrices: a small reverse-mode autodiff graph, AdamW with warmup,
//! a bidirectional transformer backbone (RoPE, SwiGLU, adaptive
//! RMSNorm), the mask-schedule/confidence-remasking decode engine with
//! classifier-free guidance, VQ and RVQ quantizers, the text-to-semantic
//! and semantic-to-acoustic models, and a flow-matching total-duration
//! predictor.
//!
//! The crate is `no_std` (with `alloc`); IO, file formats, corpora and
//! the CLI live in the companion `maskcodec` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod acoustic_codec;
pub mod duration;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod masking;
pub mod math;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod s2a;
pub mod semantic_codec;
pub mod t2s;
pub mod tensor;

pub use error::CoreError;
pub use graph::{Graph, NodeId};
pub use rng::RngState;
pub use tensor::Tensor;
