//! Grounding spatial language in world-anchored 3D voxel feature grids.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`] and [`vocab`]: boxes, relations, cameras and the closed attribute vocabulary.
//! - [`grammar`]: the utterance grammar, scene graphs and the contradiction-set builder.
//! - [`voxel`]: feature grids, rendering, unprojection, projection, crop/resize and DRAW.
//! - [`generator`]: what/where sampling, scene composition and affordability.
//! - [`detector`]: region proposals, unary and pairwise scoring, referent resolution.
//! - [`trainer`]: supervised SGD training of the detector models with gradient checks.
//! - [`control`]: kinematic placement simulator, iLQR, fitted dynamics, instruction following.
//! - [`harness`]: dataset synthesis and the experiment suites behind the CLI.

pub mod control;
pub mod detector;
pub mod error;
pub mod generator;
pub mod geometry;
pub mod grammar;
pub mod harness;
pub mod params;
pub mod rng;
pub mod trainer;
pub mod vocab;
pub mod voxel;

pub use error::{Error, Result};
