//! Core 3D types: points, rigid transforms, camera intrinsics, and the
//! spherical distance-direction parameterization used by every other module.
//!
//! Convention used throughout the crate: `phi` is the polar angle measured
//! from +z in `[0, pi]`, `theta` is the azimuth measured from +x in
//! `[0, 2*pi)`, all angles in radians. At the poles (`phi` in `{0, pi}`)
//! `theta` is canonicalized to 0 so the parameterization is deterministic.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance below which a direction from a reference point is undefined.
pub const DEGENERATE_DISTANCE: f64 = 1e-12;

/// Minimum camera-frame depth for a point to be projectable.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-9;

/// Orthonormality tolerance for rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    /// The query point coincides with the reference point, so its direction
    /// is undefined.
    #[error("point coincides with reference point (distance {0:.3e} < 1e-12)")]
    DegeneratePoint(f64),
    /// The point lies at or behind the camera plane and cannot be projected.
    #[error("point behind camera (z = {0:.3e})")]
    BehindCamera(f64),
    /// The rotation matrix is not orthonormal with determinant +1.
    #[error("matrix is not a rotation: {0}")]
    InvalidRotation(String),
}

/// A 3D point in model units (dimensionless after unit-sphere normalization).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Point3::new(v.x, v.y, v.z)
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }

    pub fn distance_squared(&self, other: &Point3) -> f64 {
        (self.to_vector() - other.to_vector()).norm_squared()
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        [p.x, p.y, p.z]
    }
}

impl std::ops::Sub for Point3 {
    type Output = Vector3<f64>;
    fn sub(self, rhs: Point3) -> Vector3<f64> {
        self.to_vector() - rhs.to_vector()
    }
}

impl std::ops::Add<Vector3<f64>> for Point3 {
    type Output = Point3;
    fn add(self, rhs: Vector3<f64>) -> Point3 {
        Point3::from_vector(self.to_vector() + rhs)
    }
}

/// An anchor from which a cluster's surface patch is parameterized radially.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub center: Point3,
    /// Index of this reference point within its template, unique in `[0, K)`.
    pub index: usize,
}

impl ReferencePoint {
    pub fn new(center: Point3, index: usize) -> Self {
        ReferencePoint { center, index }
    }
}

/// Distance-direction parameterization of a point relative to a reference
/// point: polar angle `phi` in `[0, pi]`, azimuth `theta` in `[0, 2*pi)`,
/// and distance `d >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalSample {
    pub phi: f64,
    pub theta: f64,
    pub distance: f64,
}

impl SphericalSample {
    pub fn new(phi: f64, theta: f64, distance: f64) -> Self {
        SphericalSample { phi, theta, distance }
    }

    /// The two direction parameters `(phi, theta)` without the distance.
    pub fn direction_params(&self) -> [f64; 2] {
        [self.phi, self.theta]
    }

    /// Unit bearing vector for these spherical coordinates.
    pub fn bearing(&self) -> Vector3<f64> {
        bearing_vector(self.phi, self.theta)
    }
}

/// Unit bearing vector `u(phi, theta)`.
pub fn bearing_vector(phi: f64, theta: f64) -> Vector3<f64> {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    Vector3::new(sp * ct, sp * st, cp)
}

/// Direction parameters `(phi, theta)` of a unit direction vector, with the
/// pole canonicalization described at module level.
pub fn direction_params_of(dir: &Vector3<f64>) -> [f64; 2] {
    let rho = dir.x.hypot(dir.y);
    let phi = rho.atan2(dir.z);
    let theta = if rho == 0.0 {
        0.0
    } else {
        let mut t = dir.y.atan2(dir.x);
        if t < 0.0 {
            t += std::f64::consts::TAU;
        }
        if t >= std::f64::consts::TAU {
            t = 0.0;
        }
        t
    };
    [phi, theta]
}

/// Parameterize `p` relative to `c` as `(phi, theta, d)`.
pub fn to_spherical(p: &Point3, c: &ReferencePoint) -> Result<SphericalSample, GeometryError> {
    let r = *p - c.center;
    let d = r.norm();
    if d < DEGENERATE_DISTANCE {
        return Err(GeometryError::DegeneratePoint(d));
    }
    let dir = r / d;
    let [phi, theta] = direction_params_of(&dir);
    Ok(SphericalSample::new(phi, theta, d))
}

/// Reconstruct the point `P = d * u(phi, theta) + C`.
pub fn from_spherical(s: &SphericalSample, c: &ReferencePoint) -> Point3 {
    c.center + s.bearing() * s.distance
}

/// A rigid transform `p -> R * p + t` in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    /// Build a transform, validating that `rotation` is orthonormal with
    /// determinant +1 to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let rtr = rotation.transpose() * rotation;
        let ortho_err = (rtr - Matrix3::identity()).abs().max();
        if ortho_err > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation(format!(
                "R^T R deviates from identity by {ortho_err:.3e}"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation(format!("det(R) = {det}")));
        }
        Ok(RigidTransform { rotation, translation })
    }

    pub fn identity() -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// `self` applied after `other`: `(self * other)(p) = self(other(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v + self.translation
    }
}

/// Apply the transform: returns `R * p + t`.
pub fn apply_transform(t: &RigidTransform, p: &Point3) -> Point3 {
    Point3::from_vector(t.apply_vector(&p.to_vector()))
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        CameraIntrinsics { fx, fy, cx, cy }
    }
}

/// Project a camera-frame point through the pinhole model.
pub fn project(cam: &CameraIntrinsics, p_cam: &Point3) -> Result<(f64, f64), GeometryError> {
    if p_cam.z <= MIN_PROJECTION_DEPTH {
        return Err(GeometryError::BehindCamera(p_cam.z));
    }
    let u = cam.fx * p_cam.x / p_cam.z + cam.cx;
    let v = cam.fy * p_cam.y / p_cam.z + cam.cy;
    Ok((u, v))
}
