//! Language-aligned toy driving planner.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: oriented boxes, rotated-rectangle containment, SAT overlap.
//! - [`linalg`]: a minimal row-major `Matrix` used by the pure (non-autodiff) paths.
//! - [`autodiff`]: a tape-based reverse-mode engine over flat `f64` buffers, plus AdamW.
//! - [`scene`]: synthetic driving-scene generation and (de)serialization.
//! - [`bev`]: the BEV grid, cell selection under oriented boxes, and region pooling.
//! - [`prompt`]: prompt templates, frozen text encoders, the adapter MLP, and the
//!   embedding cache.
//! - [`contrastive`]: logit scale, row normalization, similarity, and the symmetric
//!   cross-entropy losses for agent-level (ALP) and sample-level (SLP) alignment.
//! - [`planner`]: the end-to-end toy planner (conv BEV encoder, query decoder, ego
//!   pathway, plan head) with optional language-alignment attachments.
//! - [`metrics`]: open-loop planning metrics (L2, collision rate) and forecasting
//!   metrics (minADE / minFDE / miss rate).
//! - [`harness`]: experiment configs, deterministic run storage, ablation /
//!   generalization / long-tail studies, and report emission.

pub mod autodiff;
pub mod bev;
pub mod contrastive;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod planner;
pub mod prompt;
pub mod scene;

pub use error::{Error, Result};
