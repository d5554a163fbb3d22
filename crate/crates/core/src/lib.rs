//! Core pipeline for multi-label activity recognition on short video clips:
//! data model and clip labeling, synthetic scenario generation, a divided
//! space-time attention classifier, a cross-modal fusion model with LoRA
//! adapters, weighted-BCE training, and F1/timeline evaluation.
//!
//! Everything runs on the CPU in 64-bit floats. The `parallel` feature
//! (default on) enables rayon data-parallel inner loops; with it disabled the
//! same code paths run sequentially and produce identical results.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fusion;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{CoreError, Result};
