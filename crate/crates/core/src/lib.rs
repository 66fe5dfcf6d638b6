//! Single-image dehazing built from elementary-function heads.
//!
//! A backbone extracts a feature pyramid, two attention aggregators collapse
//! it to working-resolution features, and each active head predicts a
//! candidate haze-free image with one closed-form operator (atmospheric
//! scattering, multiplication, addition, power, logarithm or sine). A
//! per-pixel softmax over the heads fuses the candidates.
//!
//! The crate also carries the evaluation metrics (PSNR, SSIM, CIEDE2000),
//! dataset loaders, a synthetic-haze generator, the trainer and the `cl2s`
//! command-line tool.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod domain;
pub mod error;
pub mod fusion;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod trainer;
pub mod variants;

pub use domain::{ComponentKind, Image, VariantSpec};
pub use error::{Error, Result};
pub use variants::{Dehazer, ModelConfig};
