//! Factored multimodal 3D convolutional networks for volumetric segmentation.
//!
//! Modules, bottom-up:
//!
//! * [`numerics`]: dense tensors, a reverse-mode tape and a finite-difference checker.
//! * [`layers`]: dilated convolution, cross-F / cross-M transformations, merging.
//! * [`arch`]: named architecture variants, parameter counts, receptive fields.
//! * [`training`]: soft Dice loss, Adam, rotation augmentation, checkpoints.
//! * [`data`]: synthetic phantoms, histogram standardisation, volume files.
//! * [`eval`]: region Dice scores and the Wilcoxon signed-rank test.
//! * [`cli`]: the `scalenet` command line.

pub mod arch;
mod binio;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
