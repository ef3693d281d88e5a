//! Implicit occupancy-field reconstruction from sparse LiDAR point-cloud
//! frames with rough initial poses.
//!
//! The engine optimizes a hash-grid-encoded neural occupancy field with
//! direct occlusion-aware 3D supervision (no volume rendering), refines the
//! per-frame sensor poses jointly, and extracts the surface with marching
//! cubes. A synthetic scanner and an evaluation suite make the pipeline
//! checkable end to end on analytic scenes.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod field;
pub mod geometry;
pub mod io;
pub mod mesher;
pub mod metrics;
pub mod simulator;
pub mod supervision;
pub mod trainer;

pub use error::{Error, Result};
