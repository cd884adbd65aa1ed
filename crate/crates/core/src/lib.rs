//! Dataset preparation and evaluation toolkit for endoscopic-ultrasound
//! station classification.
//!
//! The crate covers the whole offline path from recorded frames to metrics:
//! frame sampling and noise cleaning ([`pipeline`]), image enhancement
//! ([`enhance`]), patient-level splitting and normalization ([`dataset`]),
//! evaluation measures ([`metrics`]) and a small convolutional classifier
//! with Grad-CAM ([`nn`]). The [`labeling`] module holds the session state
//! machine and event log behind the live annotation service.

// `!(x > 0.0)` is used on purpose so NaN parameters are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod enhance;
pub mod imaging;
pub mod labeling;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synthetic;

pub use imaging::{ChannelHistograms, FloatImage, ImageBuffer};
