//! Two-phase multi-dose-level low-dose PET reconstruction.
//!
//! The crate is organized bottom-up:
//!
//! * [`phantom`] simulates paired low-dose / standard-dose slices at several
//!   dose reduction factors (DRFs),
//! * [`nn`] is a small differentiable-operator core (convolutions, batch
//!   norm, activations, losses, Adam) with hand-written backward passes,
//! * [`models`] assembles PretrainNet, CPNet and RefineNet from those ops,
//! * [`train`] drives the pre-training and the coarse-to-fine prediction phase,
//! * [`metrics`] computes PSNR / SSIM / NMSE, accuracy and paired t-tests,
//! * [`cli`] wires everything into the `dosepet` command line tool.

pub mod cli;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod train;

pub use error::{Error, Result};
