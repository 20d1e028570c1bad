//! Haze laboratory: non-ideal atmospheric scattering synthesis, a two-stage
//! dehazing network trained with a four-term loss committee, and the image
//! quality metrics used to score it.
//!
//! Everything runs on procedurally generated scenes with exact ground truth,
//! so every physical relation the training relies on can be checked directly.
//!
//! Module map:
//!
//! - [`asm`]: forward and inverse scattering math, including the double-haze
//!   composition.
//! - [`synth`]: scene, depth and parameter generators plus dataset persistence.
//! - [`autodiff`]: tape-based reverse-mode engine, Adam, checkpoints.
//! - [`model`]: the dehazing network and the frozen feature extractor.
//! - [`committee`]: the loss committee, training schedule and ablation harness.
//! - [`eval`]: PSNR, SSIM, CIEDE2000 and NIQE.

pub mod asm;
pub mod autodiff;
pub mod committee;
mod error;
pub mod eval;
mod image;
pub mod model;
mod real;
pub mod synth;

pub use error::{Error, Result};
pub use image::{DepthMap, HazeParams, Image, TransmissionMap};
pub use real::Real;
