//! Cross attention control (CAC) for localized text-to-image diffusion.
//!
//! Region prompts are concatenated onto the caption, and each region's
//! attention columns are masked to its spatial layout and re-weighted after
//! the softmax. A toy "concept painter" denoiser makes the effect measurable
//! without pretrained weights, and [`eval`] scores the generated images.

pub mod attention;
pub mod benchmark;
pub mod diffusion;
mod error;
pub mod eval;
pub mod io;
pub mod layout;
pub mod numerics;
pub mod par;
pub mod text;

pub use error::{Error, Result};
