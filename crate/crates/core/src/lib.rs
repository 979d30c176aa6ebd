//! Sound event localization and detection on first-order ambisonics.
//!
//! The crate is organised bottom-up: [`tensor`] provides the autodiff tape
//! and optimizer, [`dsp`] turns FOA audio into model features, [`accdoa`]
//! maps between labels and the joint activity/direction target, [`model`]
//! holds the CNN + self-attention network and its recurrent baseline,
//! [`metrics`] scores predictions, and [`synth`] renders labelled scenes.

pub mod accdoa;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;

pub use error::{Result, SeldError};
