//! Specialized generative primitives: single-exemplar generative models over
//! sparse voxel grids extracted from 3D Gaussian splat scenes.
//!
//! The pipeline runs in two phases. Preparation turns a selected region of a
//! splat scene into a featured voxel hierarchy ([`splat_io`],
//! [`feature_field`], [`voxelizer`]) and trains a transition kernel on it
//! ([`sparse_net`], [`gca_train`]). Authoring samples new voxel states from a
//! coarse conditioning grid ([`gca`]), refines them against the exemplar
//! ([`patch_consistency`]) and transplants the exemplar's Gaussians into the
//! generated cells ([`authoring`]).

pub mod authoring;
pub mod coord;
pub mod error;
pub mod feature_field;
pub mod gca;
pub mod gca_train;
pub mod patch_consistency;
pub mod sparse_net;
pub mod splat_io;
pub mod synthetic;
pub mod voxelizer;

pub use error::{Error, Result};

/// Dimension of the per-voxel feature carried by GCA states.
pub const FEATURE_DIM: usize = 8;

/// Half of [`FEATURE_DIM`]: appearance and semantic halves are normalized independently.
pub const HALF_DIM: usize = FEATURE_DIM / 2;

/// Per-voxel feature vector.
pub type Feature = [f32; FEATURE_DIM];
