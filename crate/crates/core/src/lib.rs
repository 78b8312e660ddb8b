//! Single-view 3D super-resolution through a reversible image code.
//!
//! The library turns a metric depth map plus pinhole intrinsics into a
//! normalized three-channel coordinate image (X→R, Y→G, Z→B), runs a small
//! trainable convolutional super-resolution network in that image domain,
//! and decodes the result back to depth maps and point clouds. A synthetic
//! scene generator, a degradation pipeline (bicubic downsampling with
//! min-pooled validity masks), masked metrics, and bit-exact file formats
//! round out the experiment harness.
//!
//! Modules:
//! - [`geometry`]: intrinsics, depth maps, point clouds, backprojection.
//! - [`pncc`]: the reversible coordinate-image codec.
//! - [`resample`]: bicubic resizing and mask min-pooling.
//! - [`net`]: the convolutional SR model, loss, and trainer.
//! - [`metrics`]: masked RMSE, Chamfer distance, wall-clock benchmarking.
//! - [`synth`]: deterministic analytic scenes and dataset construction.
//! - [`io`]: readers/writers for depth images, coordinate images, point
//!   clouds, intrinsics, and checkpoints.

pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod net;
pub mod pncc;
pub mod resample;
pub mod synth;
pub(crate) mod util;

pub use error::{Error, Result};
pub use geometry::{backproject, DepthMap, Intrinsics, PointCloud};
pub use pncc::{NormalizationParams, PnccImage};
