//! Two-stage lung nodule detection built around sliding-slab maximum
//! intensity projections (MIP).
//!
//! Stage one segments the lungs, renders MIP stacks at several slab
//! thicknesses, runs one encoder-decoder network per thickness and merges
//! the per-stream detections. Stage two scores the merged candidates with
//! an ensemble of two 3-D patch classifiers. [`eval`] matches results to the
//! reference standard and computes FROC curves; [`pipeline`] ties the stages
//! to an on-disk cache and fold plan.

pub mod detect2d;
mod error;
pub mod eval;
pub mod fpr3d;
pub mod ingest;
mod label;
pub mod lungseg;
pub mod merge;
pub mod mip;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, Result};
