//! RGB-D mapping and frame-to-model camera tracking in a sparse voxel
//! radiance field, with every derivative written out by hand.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`] and [`sh`]: the voxel lattice, trilinear interpolation (value,
//!   spatial derivative, adjoint) and degree-2 spherical harmonics.
//! * [`camera`] and [`render`]: pinhole rays and discrete volume rendering of
//!   color and expected depth.
//! * [`gradients`]: map-parameter and ray-parameter derivatives of the
//!   rendering equations, plus a finite-difference harness.
//! * [`mapping`] and [`tracking`]: RMSProp map optimisation with known poses
//!   and Adam pose optimisation against a frozen map.
//! * [`dataset`] and [`eval`]: RGB-D sequence I/O, synthetic scenes, and
//!   PSNR / depth-L1 / ATE / RPE metrics.
//! * [`cli`]: the subcommands behind the `voxslam` binary.

pub mod camera;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradients;
pub mod grid;
pub mod mapping;
pub mod parallel;
pub mod render;
pub mod sh;
pub mod tracking;

pub use camera::{CameraIntrinsics, Pose, PosePerturbation, Ray};
pub use dataset::{Dataset, Frame, SceneSpec};
pub use error::{Error, Result};
pub use eval::{MetricReport, Trajectory};
pub use gradients::GradientBuffer;
pub use grid::{GridGeometry, VertexPayload, VoxelGrid};
pub use mapping::{MappingConfig, RmspropState};
pub use render::{RayWorkspace, RenderSettings};
pub use tracking::TrackingConfig;

/// Number of scalars stored per lattice vertex: one density and 3×9 SH.
pub const PARAMS_PER_VERTEX: usize = 28;
/// Spherical-harmonic coefficients per color channel (degrees 0..=2).
pub const SH_COEFFS: usize = 9;
