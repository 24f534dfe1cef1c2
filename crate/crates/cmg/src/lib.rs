//! Language-guided vision anomaly detection on synthetic paired data.
//!
//! Training consumes image/text pairs of normal samples only; testing
//! scores images alone. The pipeline combines three ideas: masking the
//! image region whose removal best preserves the text match (and a
//! detector that reproduces that choice without text), transferring the
//! text space's locally-linear reconstruction structure onto image
//! features, and Mahalanobis scoring against per-cluster Gaussians fit on
//! normal features. An ablation harness runs the image-only baseline and
//! each guidance stage separately.

pub mod cmer;
pub mod cmle;
pub mod codec;
pub mod config;
pub mod detector;
pub mod encoders;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod report;
pub mod synthdata;
pub mod testutil;

mod randutil;

pub use error::{CmgError, Result};
