//! Body-part paste augmentation for single-person keypoint estimation.
//!
//! Parts cut from human-parsing masks are pasted onto training images,
//! either at random affine placements or at placements predicted by a small
//! generator trained against the pose network. `toydata` renders a synthetic
//! stick-figure dataset that exercises the whole pipeline.

pub mod advnet;
pub mod cli;
pub mod compositor;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heatmap;
pub mod partpool;
pub mod pose;
pub mod raster;
pub mod toydata;
pub mod warp;

pub use error::{Error, Result};
