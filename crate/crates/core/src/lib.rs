//! Slimmable Vision Transformer engine.
//!
//! One full-width parameter store serves every sub-network on a configured
//! width-ratio grid. Sub-networks are activated by slicing the shared
//! parameters, trained jointly (sandwich activation with an isolated smallest
//! sub-network, progressive distillation, banded intermediate sampling and a
//! cross-entropy/KL blended loss), and evaluated or exported independently.
//!
//! Module map:
//! - [`tensor`]: dense tensors and a reverse-mode autodiff tape.
//! - [`slicing`]: exact width-ratio algebra and per-axis slice resolution.
//! - [`model`]: the slimmable ViT and its parameter store.
//! - [`coordination`]: losses, sampling, optimizer and the training step.
//! - [`harness`]: evaluation sweeps, probes, cost model, re-granularization.
//! - [`io`]: configuration, datasets, checkpoints, metrics and CLI commands.

pub mod coordination;
pub mod data;
pub mod error;
pub mod harness;
pub mod io;
pub mod model;
pub mod real;
pub mod slicing;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
