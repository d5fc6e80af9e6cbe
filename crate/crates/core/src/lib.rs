//! Artifact-detection deepfake detector.
//!
//! The crate is organised bottom-up:
//!
//! * [`image_ops`]: DSSIM maps, summed-area tables, alpha and Poisson blending.
//! * [`mfs`]: multi-scale facial swap, which turns a fake/source pair into a
//!   new fake with an artifact-box annotation.
//! * [`detection`]: default anchors, IoU matching, offset coding and NMS.
//! * [`losses`]: classification, anchor confidence and location losses.
//! * [`network`]: toy backbone plus the artifact detection module, with
//!   hand-written backward passes and the checkpoint container.
//! * [`augment`], [`procgen`], [`metrics`], [`iil`], [`train`]: data,
//!   evaluation, identity-leakage diagnostics and the training loop.

pub mod augment;
pub mod detection;
mod error;
pub mod iil;
pub mod image_ops;
pub mod losses;
pub mod metrics;
pub mod mfs;
pub mod network;
pub mod procgen;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
