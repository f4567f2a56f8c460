//! Recursive estimation of articulated-object kinematic models from noisy 3D
//! hand-landmark trajectories.
//!
//! The estimator runs three stacked Bayes filters per frame:
//!
//! 1. [`landmark`]: one constant-velocity Kalman filter per hand landmark, with
//!    visibility filtering, Mahalanobis gating and saliency-scaled covariances.
//! 2. [`body`]: a rigid-body EKF over the hand pose, initialized by
//!    uncertainty-weighted RANSAC and driven by three competing motion models.
//! 3. [`joint`]: prismatic and revolute EKFs over the hand pose trajectory with
//!    windowed likelihood model selection.
//!
//! [`pipeline`] wires the levels together; [`simulator`], [`metrics`] and
//! [`bench`] provide ground truth, tangent-error evaluation and baselines.

pub mod bench;
pub mod body;
pub mod config;
pub mod error;
pub mod filter;
pub mod geometry;
pub mod io;
pub mod joint;
pub mod landmark;
pub mod metrics;
pub mod pipeline;
pub mod simulator;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use geometry::{AxisSpherical, Gaussian, Pose6, RigidTransform, Velocity6};
pub use joint::{JointModel, JointType};
pub use pipeline::Pipeline;
