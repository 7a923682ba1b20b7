//! Multi-frame speckle denoising for tomographic image stacks.
//!
//! Frames are log-transformed, rigidly registered, given a per-pixel noise
//! estimate, and split into a low-rank clean part `L` and a bounded noise part
//! `N` by an augmented-Lagrangian solver. Quality is scored with PSNR, SSIM
//! and Pratt's figure of merit.

pub mod alm;
pub mod error;
mod filter;
pub mod imageio;
pub mod metrics;
pub mod noise;
pub mod registration;
pub mod synthetic;
pub mod volume;

pub use alm::{denoise, Denoised, SolveReport, SolverParams};
pub use error::{Error, Result};
pub use imageio::{BitDepth, RawImage, Roi};
pub use metrics::{MetricsOptions, MetricsReport};
pub use noise::{estimate_sigma, NoiseOptions};
pub use registration::{RegisteredStack, RegistrationOptions, RigidTransform};
pub use volume::{GradVolume, ImageGrid, LogVolume, Mask, SigmaMap};
