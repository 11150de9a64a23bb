//! Reference point selection: k-means clustering of the training cloud,
//! manual reference points, and inter-cluster membership overlap.

use crate::dataprep::SurfacePointCloud;
use crate::geometry::{Point3, ReferencePoint};
use nalgebra::{Matrix3, Vector3};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Default inter-cluster overlap ratio.
pub const DEFAULT_OVERLAP: f64 = 0.15;
/// Lloyd iterations stop when no centroid moves farther than this.
const CONVERGENCE_TOL: f64 = 1e-9;
/// Warn when a reference point sits closer than this to the training surface.
const NEAR_SURFACE_WARN: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ClusteringError {
    #[error("k = {k} is invalid for {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("manual reference points contain duplicates (indices {0} and {1})")]
    DuplicateCenters(usize, usize),
    #[error("no reference points given")]
    NoCenters,
}

/// Reference points plus per-cluster training memberships.
///
/// Memberships may overlap after [`apply_overlap`]. `q_matrices` holds the
/// per-cluster softmax metric; identity under k-means.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub reference_points: Vec<ReferencePoint>,
    /// For each cluster, indices into the training cloud.
    pub memberships: Vec<Vec<usize>>,
    pub q_matrices: Vec<Matrix3<f64>>,
    /// Sum of squared nearest-center distances after each Lloyd iteration;
    /// empty for assignments not produced by k-means.
    pub inertia_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.reference_points.len()
    }
}

fn nearest_center(p: &Point3, centers: &[Vector3<f64>]) -> (usize, f64) {
    let v = p.to_vector();
    let mut best = (0usize, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d2 = (v - c).norm_squared();
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    best
}

/// k-means++ seeding.
fn seed_centers(points: &[Point3], k: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..points.len())].to_vector());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| (p.to_vector() - centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let dist = WeightedIndex::new(&d2).expect("nonnegative weights");
            dist.sample(rng)
        } else {
            // All remaining points coincide with some center.
            rng.gen_range(0..points.len())
        };
        let c = points[next].to_vector();
        centers.push(c);
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min((p.to_vector() - c).norm_squared());
        }
    }
    centers
}

/// Lloyd's algorithm with k-means++ initialization. Reference points are the
/// final centroids, memberships the nearest-centroid partition, and every
/// `Q_k` the identity. Deterministic for a given seed.
pub fn kmeans(
    points: &SurfacePointCloud,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusterAssignment, ClusteringError> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(ClusteringError::InvalidK { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(&points.points, k, &mut rng);
    let mut assignment = vec![0usize; n];
    let mut inertia_history = Vec::new();

    for _ in 0..max_iters {
        let mut inertia = 0.0;
        for (i, p) in points.points.iter().enumerate() {
            let (c, d2) = nearest_center(p, &centers);
            assignment[i] = c;
            inertia += d2;
        }
        inertia_history.push(inertia);

        let mut sums = vec![Vector3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.points.iter().enumerate() {
            sums[assignment[i]] += p.to_vector();
            counts[assignment[i]] += 1;
        }

        // Re-seed any emptied centroid at the point farthest from its center.
        for c in 0..k {
            if counts[c] == 0 {
                let far = points
                    .points
                    .iter()
                    .enumerate()
                    .max_by(|(i, p), (j, q)| {
                        let di = (p.to_vector() - centers[assignment[*i]]).norm_squared();
                        let dj = (q.to_vector() - centers[assignment[*j]]).norm_squared();
                        di.partial_cmp(&dj).unwrap()
                    })
                    .map(|(i, _)| i)
                    .expect("non-empty cloud");
                log::warn!("cluster {c} emptied; re-seeding at point {far}");
                sums[c] = points.points[far].to_vector();
                counts[c] = 1;
            }
        }

        let mut shift = 0.0f64;
        for c in 0..k {
            let new_center = sums[c] / counts[c] as f64;
            shift = shift.max((new_center - centers[c]).norm());
            centers[c] = new_center;
        }
        if shift < CONVERGENCE_TOL {
            break;
        }
    }

    // Final assignment against the converged centers.
    let mut memberships = vec![Vec::new(); k];
    let mut inertia = 0.0;
    for (i, p) in points.points.iter().enumerate() {
        let (c, d2) = nearest_center(p, &centers);
        memberships[c].push(i);
        inertia += d2;
    }
    inertia_history.push(inertia);

    let reference_points = centers
        .iter()
        .enumerate()
        .map(|(i, c)| ReferencePoint::new(Point3::from_vector(*c), i))
        .collect();
    let out = ClusterAssignment {
        reference_points,
        memberships,
        q_matrices: vec![Matrix3::identity(); k],
        inertia_history,
    };
    warn_near_surface(&out, points);
    Ok(out)
}

/// Nearest-center assignment to user-supplied reference points, identity Q.
pub fn manual_reference_points(
    points: &SurfacePointCloud,
    centers: &[Point3],
) -> Result<ClusterAssignment, ClusteringError> {
    if centers.is_empty() {
        return Err(ClusteringError::NoCenters);
    }
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            if centers[i].distance(&centers[j]) < 1e-12 {
                return Err(ClusteringError::DuplicateCenters(i, j));
            }
        }
    }
    let center_vecs: Vec<Vector3<f64>> = centers.iter().map(|c| c.to_vector()).collect();
    let mut memberships = vec![Vec::new(); centers.len()];
    for (i, p) in points.points.iter().enumerate() {
        memberships[nearest_center(p, &center_vecs).0].push(i);
    }
    let reference_points = centers
        .iter()
        .enumerate()
        .map(|(i, c)| ReferencePoint::new(*c, i))
        .collect();
    let out = ClusterAssignment {
        reference_points,
        memberships,
        q_matrices: vec![Matrix3::identity(); centers.len()],
        inertia_history: Vec::new(),
    };
    warn_near_surface(&out, points);
    Ok(out)
}

/// Each point additionally joins every cluster whose center lies within
/// `(1 + rho)` times its nearest-center distance. `rho = 0` reproduces the
/// nearest-center partition.
pub fn apply_overlap(
    assignment: &ClusterAssignment,
    points: &SurfacePointCloud,
    rho: f64,
) -> ClusterAssignment {
    assert!(rho >= 0.0, "overlap ratio must be nonnegative");
    let centers: Vec<Vector3<f64>> = assignment
        .reference_points
        .iter()
        .map(|r| r.center.to_vector())
        .collect();
    let mut memberships = vec![Vec::new(); assignment.k()];
    for (i, p) in points.points.iter().enumerate() {
        let v = p.to_vector();
        let dists: Vec<f64> = centers.iter().map(|c| (v - c).norm()).collect();
        let dmin = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        for (c, d) in dists.iter().enumerate() {
            if *d <= (1.0 + rho) * dmin {
                memberships[c].push(i);
            }
        }
    }
    ClusterAssignment { memberships, ..assignment.clone() }
}

fn warn_near_surface(assignment: &ClusterAssignment, points: &SurfacePointCloud) {
    for r in &assignment.reference_points {
        let min_dist = points
            .points
            .iter()
            .map(|p| p.distance(&r.center))
            .fold(f64::INFINITY, f64::min);
        if min_dist < NEAR_SURFACE_WARN {
            log::warn!(
                "reference point {} lies within {min_dist:.2e} of the training surface; \
                 its distance field may be poorly conditioned",
                r.index
            );
        }
    }
}
