//! Input preparation: mesh/cloud ingestion, unit-sphere normalization,
//! dense surface sampling by ray casting from a Fibonacci camera grid, and
//! disjoint train/test subsampling.

pub mod io;

use crate::geometry::Point3;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Default number of virtual cameras on the Fibonacci grid.
pub const DEFAULT_CAMERAS: usize = 200;
/// Default full cone aperture of each camera's ray fan, in radians (60 deg).
pub const DEFAULT_APERTURE: f64 = std::f64::consts::FRAC_PI_3;
/// Cameras sit at this radius looking at the origin; outside the unit ball.
pub const CAMERA_RADIUS: f64 = 2.0;
/// Hits closer than this are considered duplicates of each other.
const DEDUP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DataprepError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("cloud has no spatial extent; unit-sphere scale is undefined")]
    DegenerateExtent,
    #[error("no ray hit the mesh")]
    NoHits,
    #[error("cloud has {have} points, need at least {need}")]
    InsufficientPoints { have: usize, need: usize },
    #[error("face {face} references vertex {index}, but mesh has {n_vertices} vertices")]
    FaceIndexOutOfRange { face: usize, index: usize, n_vertices: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Affine normalization `p_norm = (p_orig - center) * scale`.
///
/// `scale` is the factor applied to reach normalized units, so a cube with
/// corners at `(+-1)^3` normalizes with `scale = 1/sqrt(3)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Point3,
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization { center: Point3::ORIGIN, scale: 1.0 }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from_vector((*p - self.center) * self.scale)
    }

    /// Map a normalized point back to original units.
    pub fn invert(&self, p: &Point3) -> Point3 {
        self.center + p.to_vector() / self.scale
    }

    /// Convert a length in original units to normalized units.
    pub fn length_to_normalized(&self, len: f64) -> f64 {
        len * self.scale
    }

    /// The normalization equivalent to applying `self` then `next`.
    pub fn then(&self, next: &Normalization) -> Normalization {
        Normalization {
            center: self.center + next.center.to_vector() / self.scale,
            scale: self.scale * next.scale,
        }
    }
}

/// An ordered set of surface points plus the normalization that maps them
/// back to the source model's units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfacePointCloud {
    pub points: Vec<Point3>,
    pub normalization: Normalization,
}

impl SurfacePointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        SurfacePointCloud { points, normalization: Normalization::identity() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A triangle mesh. Degenerate (zero-area) faces are dropped on construction.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self, DataprepError> {
        let n = vertices.len();
        let mut usable = Vec::with_capacity(faces.len());
        let mut dropped = 0usize;
        for (fi, f) in faces.iter().enumerate() {
            for &idx in f {
                if idx >= n {
                    return Err(DataprepError::FaceIndexOutOfRange {
                        face: fi,
                        index: idx,
                        n_vertices: n,
                    });
                }
            }
            let a = vertices[f[0]].to_vector();
            let b = vertices[f[1]].to_vector();
            let c = vertices[f[2]].to_vector();
            if (b - a).cross(&(c - a)).norm() > 0.0 {
                usable.push(*f);
            } else {
                dropped += 1;
            }
        }
        if dropped > 0 {
            log::debug!("dropped {dropped} zero-area faces");
        }
        Ok(TriangleMesh { vertices, faces: usable })
    }

    /// Normalize vertices in place with the same bounding-box rule as
    /// [`normalize_unit_sphere`]; returns the applied normalization.
    pub fn normalize_unit_sphere(&mut self) -> Result<Normalization, DataprepError> {
        let norm = unit_sphere_normalization(&self.vertices)?;
        for v in &mut self.vertices {
            *v = norm.apply(v);
        }
        Ok(norm)
    }
}

fn unit_sphere_normalization(points: &[Point3]) -> Result<Normalization, DataprepError> {
    if points.is_empty() {
        return Err(DataprepError::EmptyCloud);
    }
    let mut min = points[0].to_vector();
    let mut max = min;
    for p in points {
        let v = p.to_vector();
        min = min.inf(&v);
        max = max.sup(&v);
    }
    let center = Point3::from_vector((min + max) / 2.0);
    let max_dist = points
        .iter()
        .map(|p| p.distance(&center))
        .fold(0.0f64, f64::max);
    if max_dist < 1e-15 {
        return Err(DataprepError::DegenerateExtent);
    }
    Ok(Normalization { center, scale: 1.0 / max_dist })
}

/// Center a cloud at its bounding-box center and scale so `max ||p|| = 1`.
///
/// The composed normalization is recorded on the output so results can be
/// mapped back to the source units.
pub fn normalize_unit_sphere(cloud: &SurfacePointCloud) -> Result<SurfacePointCloud, DataprepError> {
    let step = unit_sphere_normalization(&cloud.points)?;
    let points = cloud.points.iter().map(|p| step.apply(p)).collect();
    Ok(SurfacePointCloud { points, normalization: cloud.normalization.then(&step) })
}

/// `n` near-uniform unit directions from the Fibonacci (golden-angle) lattice.
pub fn fibonacci_directions(n: usize) -> Vec<Vector3<f64>> {
    assert!(n >= 1, "need at least one direction");
    let golden_angle = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let theta = golden_angle * i as f64;
            Vector3::new(r * theta.cos(), r * theta.sin(), z)
        })
        .collect()
}

/// Moeller-Trumbore ray/triangle intersection; returns the ray parameter `t`.
fn ray_triangle(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = origin - a;
    let u = tvec.dot(&pvec) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qvec) * inv_det;
    (t > 1e-9).then_some(t)
}

/// First intersection of a ray with the mesh, if any.
fn first_hit(mesh: &TriangleMesh, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Point3> {
    let mut best: Option<f64> = None;
    for f in &mesh.faces {
        let a = mesh.vertices[f[0]].to_vector();
        let b = mesh.vertices[f[1]].to_vector();
        let c = mesh.vertices[f[2]].to_vector();
        if let Some(t) = ray_triangle(origin, dir, &a, &b, &c) {
            if best.map_or(true, |tb| t < tb) {
                best = Some(t);
            }
        }
    }
    best.map(|t| Point3::from_vector(origin + dir * t))
}

/// Orthonormal basis with `w` as the third axis.
fn basis_for(w: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let up = if w.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = up.cross(w).normalize();
    let v = w.cross(&u);
    (u, v)
}

/// Sample the mesh surface by casting ray fans from virtual cameras placed at
/// radius 2 along each direction, looking at the origin, with the default
/// 60-degree aperture. The first intersection of each ray is retained and
/// near-duplicate hits (within 1e-9) are removed.
pub fn raycast_sample(
    mesh: &TriangleMesh,
    camera_dirs: &[Vector3<f64>],
    rays_per_camera: usize,
) -> Result<SurfacePointCloud, DataprepError> {
    raycast_sample_with_aperture(mesh, camera_dirs, rays_per_camera, DEFAULT_APERTURE)
}

/// As [`raycast_sample`] with an explicit full cone aperture in radians.
pub fn raycast_sample_with_aperture(
    mesh: &TriangleMesh,
    camera_dirs: &[Vector3<f64>],
    rays_per_camera: usize,
    aperture: f64,
) -> Result<SurfacePointCloud, DataprepError> {
    let golden_angle = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let cos_half = (aperture / 2.0).cos();

    // One deterministic record per ray; parallelism must not reorder output.
    let mut hits: Vec<(usize, Point3)> = camera_dirs
        .par_iter()
        .enumerate()
        .flat_map_iter(|(ci, dir)| {
            let origin = dir.normalize() * CAMERA_RADIUS;
            let look = -dir.normalize();
            let (u, v) = basis_for(&look);
            (0..rays_per_camera).filter_map(move |j| {
                // Spiral fan over the cone: cos(alpha) from 1 down to cos_half.
                let ca = 1.0 - (1.0 - cos_half) * (j as f64 + 0.5) / rays_per_camera as f64;
                let sa = (1.0 - ca * ca).max(0.0).sqrt();
                let beta = golden_angle * j as f64;
                let ray = (look * ca + u * (sa * beta.cos()) + v * (sa * beta.sin())).normalize();
                first_hit(mesh, &origin, &ray).map(|p| (ci * rays_per_camera + j, p))
            })
        })
        .collect();
    hits.sort_by_key(|(idx, _)| *idx);

    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    let mut points: Vec<Point3> = Vec::with_capacity(hits.len());
    let key_of = |p: &Point3| {
        (
            (p.x / DEDUP_TOL).round() as i64,
            (p.y / DEDUP_TOL).round() as i64,
            (p.z / DEDUP_TOL).round() as i64,
        )
    };
    'outer: for (_, p) in hits {
        let (kx, ky, kz) = key_of(&p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = grid.get(&(kx + dx, ky + dy, kz + dz)) {
                        if ids.iter().any(|&i| points[i].distance(&p) < DEDUP_TOL) {
                            continue 'outer;
                        }
                    }
                }
            }
        }
        grid.entry((kx, ky, kz)).or_default().push(points.len());
        points.push(p);
    }

    if points.is_empty() {
        return Err(DataprepError::NoHits);
    }
    Ok(SurfacePointCloud::new(points))
}

/// Draw two disjoint subsamples of the stated sizes. Deterministic per seed.
pub fn split_train_test(
    cloud: &SurfacePointCloud,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(SurfacePointCloud, SurfacePointCloud), DataprepError> {
    let need = n_train + n_test;
    if cloud.len() < need {
        return Err(DataprepError::InsufficientPoints { have: cloud.len(), need });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, cloud.len(), need);
    let take = |range: std::ops::Range<usize>| SurfacePointCloud {
        points: range.map(|i| cloud.points[picked.index(i)]).collect(),
        normalization: cloud.normalization,
    };
    Ok((take(0..n_train), take(n_train..need)))
}
