//! Two-stage volumetric segmentation with small convolutional networks.
//!
//! Stage one classifies every axial, coronal and sagittal slice for the
//! presence of the target and fuses the three per-slice probability profiles
//! into a bounding box. Stage two classifies every voxel inside that box from
//! three orthogonal 48×48 patches, then smooths the probability map, thresholds
//! it and keeps the largest connected component.

pub mod cli;
pub mod error;
pub mod localizer;
pub mod metrics;
pub mod neuralnet;
pub mod phantom;
pub mod segmenter;
pub mod training;
pub mod volgrid;

pub use error::{Error, Result};
