//! Operational shell around `maskcodec-core`: configuration, the
//! checkpoint container, corpus and report file formats, synthetic
//! corpus generation, training loops, evaluation, and synthesis.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod formats;
pub mod synth;
pub mod synthetic;
pub mod train;
pub mod wiring;
