//! Saliency-guided dropout.
//!
//! During training the most salient latent features of each sample (by
//! latent attribution of its true class, computed on an EMA copy of the
//! network) are zeroed before the classifier sees them. Only `⌊ρ·d⌋`
//! features per sample are dropped, and survivors are not rescaled.

pub mod ema;
pub mod mask;
pub mod schedule;
pub mod step;

pub use ema::EmaState;
pub use mask::{apply_mask, compute_batch_masks, compute_mask, drop_count, top_k_indices, DropMask};
pub use schedule::RhoSchedule;
pub use step::{sgdrop_masks, sgdrop_step, SgdropConfig, StepStats};
