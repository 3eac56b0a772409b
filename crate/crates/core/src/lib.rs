//! Dual noise estimation (DNE) for coarse-to-fine hand mesh refinement.
//!
//! A coarse hand mesh, its orthographic camera and an image-aligned feature
//! grid go in; per-vertex 2D and 3D Gaussian noise is estimated, the vertices
//! and their image-plane coordinates are refined over several stages, and the
//! camera is re-fitted in closed form after each stage.
//!
//! Module map:
//!
//! - [`mesh`]: hand meshes, the procedural template and the MPVPE/MPJPE metrics.
//! - [`camera`]: orthographic projection and ridge-regression camera correction.
//! - [`noise`]: the dual Gaussian noise model and reparameterized sampling.
//! - [`features`]: feature grids, bilinear lookup, coordinate regression and
//!   three-view voxel pooling.
//! - [`neural`]: dense layers with hand-written reverse mode and plain gradient descent.
//! - [`pipeline`]: the DNE stage, progressive refinement, the vertex loss and training.
//! - [`pack`]: the `DNEPACK1` binary tensor container.
//! - [`verify`]: oracle suites shared by the tests and the `verify` subcommand.

pub mod camera;
pub mod error;
pub mod features;
pub mod mesh;
pub mod neural;
pub mod noise;
pub mod pack;
pub mod pipeline;
pub mod rng;
pub mod verify;

pub use camera::{correct_camera, project, projection_residual, Camera, RidgeConfig};
pub use error::{DneError, Result};
pub use features::{FeatureGrid, VoxelGrid};
pub use mesh::{mpjpe, mpvpe, mpvpe_2d, regress_joints, HandMesh, JointSet};
pub use noise::{NoiseField, NoiseSample};
pub use pipeline::{DnePipelineParams, DneStageParams, PipelineConfig, RefinementState};

/// 2D point in pixels.
pub type Vec2 = [f64; 2];
/// 3D point in scene units.
pub type Vec3 = [f64; 3];
