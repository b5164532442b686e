//! Rank-1 adapter interpretability workbench.
//!
//! Pipeline stages, bottom-up:
//!
//! - [`tensor`]: dense tensors with tape-based reverse-mode autodiff
//! - [`microlm`]: toy decoder-only transformer, synthetic corpora, training
//! - [`lora`]: rank-r adapters on every projection, activation taps, ablation masks
//! - [`harness`]: activation dumps, max-activating contexts, MLP neuron baseline
//! - [`sae`]: batch-top-k sparse autoencoder over the adapter state
//! - [`autointerp`]: LLM explanation, classification and categorization
//! - [`ablation`]: KL sweeps, group ablations, recovery percentages
//! - [`report`]: static HTML dashboards
//! - [`pipeline`]: run configuration, stage commands and run manifests

pub mod ablation;
pub mod autointerp;
pub mod error;
pub mod harness;
pub mod io;
pub mod lora;
pub mod microlm;
pub mod pipeline;
pub mod report;
pub mod sae;
pub mod tensor;

pub use error::{Error, Result};
