//! Two-domain time-lapse image sequence GAN.
//!
//! The generator synthesises paired brightfield/fluorescence sequences of
//! three timesteps from a single latent code; a U-Net discriminator with
//! scalar and pixel-wise heads drives adversarial training with top-k
//! filtering, lazy R1 / path-length regularization, CutMix consistency,
//! disordered-sequence negatives and adaptive discriminator augmentation.
//! An evaluation harness provides Fréchet-distance metrics (FID / FVD over
//! pluggable embedders) and the Inception Score.

pub mod ada;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod dsc;
pub mod elem;
pub mod error;
pub mod export;
pub mod generator;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod trainer;

pub use elem::Elem;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
