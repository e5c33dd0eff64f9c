//! Volumetric segmentation toolkit built around a miniature 3D U-Net.
//!
//! The pipeline localizes a region of interest, runs a deeply supervised
//! network trained with a composite loss (Dice, overlap and a focal
//! positive term gated by a learned threshold map), optionally refines the
//! prediction recursively by feeding probability maps back into the input,
//! and evaluates masks with overlap and boundary-distance metrics.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod gradsuite;
pub mod inference;
pub mod labeling;
pub mod losses;
pub mod metrics;
pub mod net3d;
pub mod phantom;
pub mod pipeline;
pub mod trainer;
pub mod volcore;

pub use error::{Error, Result};
pub use volcore::{BinaryMask, RoiBox, Volume};
