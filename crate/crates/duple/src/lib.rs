//! Few-shot vibration-event recognition across heterogeneous sensor
//! deployments.
//!
//! The crate implements a dual-domain episodic pipeline: raw vibration
//! signals are embedded by a time-domain 1-D CNN and a frequency-domain
//! 2-D CNN, class evidence is formed by an adaptive multi-prototype
//! matcher, a statistical guidance network conditions the matcher on
//! hand-crafted signal statistics, and a cross-domain alignment module
//! fuses the two domains into the final class logits.  Everything is
//! trained end to end with the reverse-mode autodiff engine in
//! [`diffcore`], episode by episode, and evaluated on deployments that
//! were never seen during training.
//!
//! The major pieces:
//!
//! * [`dataio`] — signal files, dataset manifests, resampling and the
//!   synthetic benchmark generator.
//! * [`featurize`] — spectrograms and the 26-dimensional statistical
//!   feature vector with its train-time normalizer.
//! * [`diffcore`] — tensors, the gradient tape, parameter store, Adam
//!   and finite-difference gradient checking.
//! * [`encoders`] — the two CNN embedding branches.
//! * [`fpm`] — adaptive multi-prototype construction and matching.
//! * [`sgn`] — statistical guidance (feature analyzers, domain weights,
//!   temperature and confidence heads).
//! * [`cdm`] — query-conditioned cross-domain alignment and fusion.
//! * [`model`] — the assembled pipeline with ablation switches.
//! * [`episodic`] — episode sampling, meta-training, evaluation,
//!   metrics and the prototypical-network baseline.

pub mod cdm;
pub mod dataio;
pub mod diffcore;
pub mod encoders;
pub mod episodic;
pub mod error;
pub mod featurize;
pub mod fpm;
pub mod model;
pub mod sgn;
#[cfg(test)]
pub(crate) mod testutil;
pub mod util;

pub use error::{Error, Result};
