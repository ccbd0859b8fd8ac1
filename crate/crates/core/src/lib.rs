//! Camera-LiDAR extrinsic calibration machinery built around extrinsic-aware
//! cross-attention.
//!
//! The crate covers the full forward path of the calibration network at desk
//! scale: SE(3) algebra, pinhole projection and patch-grid coordinate
//! alignment, point grouping, harmonic positional embedding, scale-free
//! multi-head cross-attention (with analytic gradients), the dual-branch
//! regression head, and the evaluation harness with iterative refinement and
//! success-rate metrics.
//!
//! Data-parallel loops (per-point projection, per-centroid kNN, per-sample
//! evaluation) run on rayon when the `parallel` feature is enabled, and fall
//! back to plain iterators otherwise. See [`par::Parallelism`].

pub mod attention;
pub mod checkpoint;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod grouping;
pub mod harness;
pub mod io;
pub mod model;
pub mod par;
pub mod projection;
pub mod regressor;
pub mod rng;
pub mod tensor;

pub use error::{CalibError, Result};
pub use geometry::{PerturbRange, RigidTransform, Se3Tangent};
pub use projection::Intrinsics;
