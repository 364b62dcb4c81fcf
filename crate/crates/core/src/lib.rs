//! Fitting articulated human-object interaction sequences to 2D body
//! keypoints and 3D contact anchors.
//!
//! The pipeline runs in two stages. A static stage aligns a skinned,
//! articulated body to multi-view keypoints. A motion stage then tracks a
//! window of frames from a single view, pulling human contact vertices
//! onto object surface anchors while penalizing interpenetration, jitter
//! and implausible poses.

pub mod body_model;
pub mod cli;
pub mod contact;
pub mod error;
pub mod gradients;
pub mod io;
pub mod losses;
pub mod mesh;
pub mod optimizer;
pub mod scene_camera;
pub mod so3;
pub mod synthetic;

pub use error::{Error, Result};
