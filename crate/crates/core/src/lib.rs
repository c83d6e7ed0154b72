//! Compositional neural-field scene editing.
//!
//! Erase a masked object from a multiview scene by distilling an inpainting
//! prior into a background field rendered only inside a "bubble" around the
//! mask, then distill a new foreground field that is alpha-composited over
//! the inpainted background. Pretrained models (latent diffusion, depth,
//! perceptual and embedding networks) sit behind provider traits; the crate
//! ships deterministic reference providers so every stage can be checked
//! against known answers.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod field;
pub mod guidance;
pub mod metrics;
pub mod objectives;
pub mod parallel;
pub mod render;
pub mod scene;
pub mod synthetic;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
