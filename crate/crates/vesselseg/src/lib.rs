//! Hepatic vessel segmentation for 3D ultrasound volumes.
//!
//! The pipeline covers the full path from tracked 2D frames to evaluated
//! segmentations:
//!
//! - [`compound`] — reconstruct a regular voxel volume from electromagnetically
//!   tracked 2D frames (freehand "stacked 2D" acquisition).
//! - [`volume`] — the voxel-grid type, MetaImage-compatible disk format, and
//!   the preprocessing chain (resample, median filter, normalize, pad).
//! - [`augment`] — patch extraction with rotation / scaling / elastic
//!   deformation applied identically to image and label.
//! - [`autodiff`] — a minimal reverse-mode differentiable tensor core with
//!   hand-written backward passes for every op the network needs.
//! - [`unet`] — the reduced-filter 3D U-Net (an eighth of the original filter
//!   counts), initialization, tiled inference, and parameter serialization.
//! - [`train`] — soft-Dice loss, L1 regularization, Adam, and the training loop.
//! - [`metrics`] — hard Dice / IoU, TP/FP/FN overlays, and report aggregation.
//! - [`phantom`] — synthetic vessel phantoms with ultrasound-like speckle for
//!   desk-scale training and testing.
//!
//! Heavy inner loops are data-parallel via rayon when the `parallel` feature
//! (default) is enabled; disabling it falls back to identical sequential code.
//! Results are bitwise independent of the thread count.

pub mod augment;
pub mod autodiff;
pub mod compound;
pub mod error;
pub mod metrics;
pub mod parallel;
pub mod phantom;
pub mod train;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
