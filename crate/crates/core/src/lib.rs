//! Functional shape templates from Gaussian-process directional distance
//! fields, and a method-agnostic confidence score for 6D object pose
//! estimates.
//!
//! The pipeline has an off-line and an on-line stage. Off-line,
//! [`template::build_template`] partitions a sparse surface cloud into
//! clusters, parameterizes each cluster radially around its reference point,
//! fits one exact GP distance field per cluster, and calibrates per-cluster
//! variances on held-out points. On-line, [`confidence::score_pose`]
//! back-projects 2D-3D correspondences through a candidate pose and scores
//! their agreement with the template; [`confidence::confidence_bound`] links
//! scores to a distance margin.

pub mod clustering;
pub mod confidence;
pub mod dataprep;
pub mod geometry;
pub mod gp;
pub mod metrics;
pub mod shapes;
pub mod synthbench;
pub mod template;

pub use geometry::{CameraIntrinsics, Point3, ReferencePoint, RigidTransform, SphericalSample};
