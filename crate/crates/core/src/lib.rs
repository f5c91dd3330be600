//! Localizable rotation (LoRot) auxiliary self-supervision for image
//! classifiers, plus the tooling to measure what it does.
//!
//! * [`transforms`]: LoRot-I / LoRot-E / global rotation transforms and
//!   their label spaces.
//! * [`model`] and [`nn`]: a dual-head CNN (primary and pretext softmax
//!   heads over one shared extractor) on a small CPU engine.
//! * [`train`]: the multi-task objective, the DA / MT / PT strategies,
//!   PGD attacks and adversarial training.
//! * [`data`]: datasets, synthetic generators, long-tailed subsampling and
//!   out-of-distribution pairing.
//! * [`eval`]: accuracy, affinity, OOD scores and AUROC, class-wise
//!   confidence and robustness.
//! * [`experiment`]: declarative configs, desk-scale recipes and reports.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod image;
pub mod io_util;
pub mod model;
pub mod nn;
pub mod rng;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
pub use image::{Image, ImageTensor};
