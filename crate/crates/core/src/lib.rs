//! Reward-curated self-training for a toy text-to-image diffusion model.
//!
//! The crate walks the whole loop at desk scale:
//!
//! 1. [`diffusion`] trains a tiny conditional x-prediction denoiser on
//!    procedural 16×16 scenes and samples from it deterministically.
//! 2. [`curation`] generates `N × K` candidates, scores them with the
//!    analytic oracles in [`rewards`], thresholds them and keeps one
//!    representative per prompt.
//! 3. [`lora`] fine-tunes one low-rank adapter set per quality aspect on
//!    the denoiser's attention projections.
//! 4. [`composition`] combines the adapter sets either by a fixed
//!    convex merge or through a per-layer softmax router trained with a
//!    gating-balancing penalty.
//! 5. [`pipeline`] wires the stages together, persists every artifact and
//!    produces evaluation and gate reports.
//!
//! Everything trainable flows through the reverse-mode tape in
//! [`numerics`], whose gradients are checked against finite differences.

pub mod composition;
pub mod curation;
pub mod diffusion;
pub mod error;
pub mod lora;
pub mod numerics;
pub mod pipeline;
pub mod rewards;

pub use error::{Error, Result};
