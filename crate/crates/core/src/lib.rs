//! Mesh-rigged 2D Gaussian surfel engine.
//!
//! A blendshape head mesh carries flat Gaussian surfels bound to its
//! triangles. The crate poses the mesh, binds and shades the surfels,
//! rasterizes them (and the mesh) into color/depth/normal/alpha buffers,
//! differentiates the whole chain analytically, and fits model parameters
//! to target images with Adam. A geometric evaluation bench measures
//! point-to-surface error after similarity alignment.
//!
//! The crate is `no_std` + `alloc`. The `std` feature only forwards to
//! dependencies; `parallel` spreads tiles and cloud points over rayon
//! without changing any result bit.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod error;
pub mod eval;
pub mod fit;
pub mod image;
pub mod math;
pub mod model;
pub mod objective;
pub mod optim;
pub mod raster;
pub mod render;
pub mod rig;
pub mod shading;

mod par;

pub use error::{Error, Result};
pub use math::{Mat3, Quat, Vec3};
