//! Pose confidence: back-project 2D-3D correspondences through a candidate
//! pose into the object frame, evaluate them against the shape template,
//! aggregate the weighted maximum densities into a score, and bound the
//! score from below for a chosen distance margin.

use crate::geometry::{
    apply_transform, CameraIntrinsics, GeometryError, Point3, RigidTransform,
    MIN_PROJECTION_DEPTH,
};
use crate::template::{ShapeTemplate, TemplateError};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("no usable correspondences after back-projection")]
    NoUsablePoints,
    #[error("margin delta must be positive, got {0}")]
    InvalidDelta(f64),
    #[error("{sigmas} sigmas vs {weights} weights")]
    LengthMismatch { sigmas: usize, weights: usize },
    #[error("weights sum to {0}, expected 1")]
    BadWeightSum(f64),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// One 2D-3D correspondence: a pixel, the matched model point in the object
/// frame, and an optional classifier weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: (f64, f64),
    pub object_point: Point3,
    pub weight: f64,
}

/// Where per-point weights come from during scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightsMode {
    /// `w_i = 1/N` over the usable points.
    Uniform,
    /// Use the correspondence weights, renormalized over the usable points.
    Provided,
}

/// Per-point diagnostics of a scored pose.
#[derive(Debug, Clone, Copy)]
pub struct ScoredPoint {
    /// Index into the input correspondence list.
    pub index: usize,
    pub back_projected: Point3,
    pub best_cluster: usize,
    /// Maximum per-cluster density of this point.
    pub density: f64,
    /// Radial residual at the best cluster.
    pub residual: f64,
    /// Calibrated standard deviation of the best cluster.
    pub sigma: f64,
    /// Weight used in the aggregate score.
    pub weight: f64,
}

/// Result of scoring one pose against a template.
#[derive(Debug, Clone)]
pub struct ConfidenceReport {
    /// `sum_i w_i max_k q(P_i | C_k)`.
    pub score: f64,
    /// Margin for which `bound` was evaluated, once chosen.
    pub delta: Option<f64>,
    /// Closed-form lower bound on the average confidence for `delta`.
    pub bound: Option<f64>,
    pub per_point: Vec<ScoredPoint>,
    /// Indices of correspondences dropped by back-projection.
    pub excluded: Vec<usize>,
}

impl ConfidenceReport {
    /// Evaluate the margin bound with each scored point's own calibrated
    /// sigma and the weights used for the score.
    pub fn set_margin(&mut self, delta: f64) -> Result<(), ConfidenceError> {
        let sigmas: Vec<f64> = self.per_point.iter().map(|p| p.sigma).collect();
        let weights: Vec<f64> = self.per_point.iter().map(|p| p.weight).collect();
        self.bound = Some(confidence_bound(&sigmas, &weights, delta)?);
        self.delta = Some(delta);
        Ok(())
    }
}

/// Deterministic pairwise summation, independent of evaluation order.
fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Lift each correspondence pixel to the object frame: cast the camera ray
/// through the pixel, take the point at the depth the pose assigns to the
/// matched model point, and map it back through the inverse pose. With a
/// perfect pose and noise-free pixels this reproduces the model point.
///
/// Entries are `None` where the transformed point falls at or behind the
/// camera plane.
pub fn back_project(
    corrs: &[Correspondence],
    pose: &RigidTransform,
    cam: &CameraIntrinsics,
) -> Vec<Option<Point3>> {
    let inv = pose.inverse();
    corrs
        .iter()
        .map(|c| {
            let p_cam = pose.apply_vector(&c.object_point.to_vector());
            let z = p_cam.z;
            if z <= MIN_PROJECTION_DEPTH {
                return None;
            }
            let ray = Vector3::new(
                (c.pixel.0 - cam.cx) / cam.fx,
                (c.pixel.1 - cam.cy) / cam.fy,
                1.0,
            );
            Some(Point3::from_vector(inv.apply_vector(&(ray * z))))
        })
        .collect()
}

/// Score a pose estimate: the weighted sum over back-projected points of the
/// maximum per-cluster calibrated density.
pub fn score_pose(
    template: &ShapeTemplate,
    corrs: &[Correspondence],
    pose: &RigidTransform,
    cam: &CameraIntrinsics,
    weights_mode: WeightsMode,
) -> Result<ConfidenceReport, ConfidenceError> {
    let lifted = back_project(corrs, pose, cam);
    let mut usable = Vec::new();
    let mut excluded = Vec::new();
    for (i, p) in lifted.into_iter().enumerate() {
        match p {
            Some(p) => usable.push((i, p)),
            None => excluded.push(i),
        }
    }
    if usable.is_empty() {
        return Err(ConfidenceError::NoUsablePoints);
    }

    // Excluded points forfeit their weight; survivors are renormalized.
    let weights: Vec<f64> = match weights_mode {
        WeightsMode::Uniform => vec![1.0 / usable.len() as f64; usable.len()],
        WeightsMode::Provided => {
            let total: f64 = usable.iter().map(|(i, _)| corrs[*i].weight).sum();
            if total <= 0.0 {
                return Err(ConfidenceError::BadWeightSum(total));
            }
            usable.iter().map(|(i, _)| corrs[*i].weight / total).collect()
        }
    };

    let mut per_point = Vec::with_capacity(usable.len());
    for ((index, point), weight) in usable.into_iter().zip(weights) {
        let q = template.point_likelihood(&point)?;
        per_point.push(ScoredPoint {
            index,
            back_projected: point,
            best_cluster: q.best_cluster,
            density: q.max_density,
            residual: q.per_cluster[q.best_cluster].residual,
            sigma: template.calibrated_sigma2[q.best_cluster].sqrt(),
            weight,
        });
    }
    let contributions: Vec<f64> = per_point.iter().map(|p| p.weight * p.density).collect();
    let score = pairwise_sum(&contributions);
    Ok(ConfidenceReport { score, delta: None, bound: None, per_point, excluded })
}

/// Closed-form lower bound on the average confidence when every residual is
/// within `[-delta, delta]`:
/// `1/(sqrt(2 pi) delta^2) sum_i w_i sigma_i (1 - exp(-delta^2 / (2 sigma_i^2)))`.
///
/// `sigmas` are per-point calibrated standard deviations; `weights` must sum
/// to one.
pub fn confidence_bound(
    sigmas: &[f64],
    weights: &[f64],
    delta: f64,
) -> Result<f64, ConfidenceError> {
    if !(delta > 0.0) {
        return Err(ConfidenceError::InvalidDelta(delta));
    }
    if sigmas.len() != weights.len() {
        return Err(ConfidenceError::LengthMismatch {
            sigmas: sigmas.len(),
            weights: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(ConfidenceError::BadWeightSum(total));
    }
    let terms: Vec<f64> = sigmas
        .iter()
        .zip(weights)
        .map(|(s, w)| w * s * (-delta * delta / (2.0 * s * s)).exp_m1().neg())
        .collect();
    Ok(pairwise_sum(&terms) / ((2.0 * std::f64::consts::PI).sqrt() * delta * delta))
}

/// Standalone threshold for a template before any pose is scored: the bound
/// with per-cluster sigmas weighted by each cluster's training share.
pub fn template_bound(template: &ShapeTemplate, delta: f64) -> Result<f64, ConfidenceError> {
    let sigmas: Vec<f64> = template.calibrated_sigma2.iter().map(|s2| s2.sqrt()).collect();
    confidence_bound(&sigmas, &template.training_shares(), delta)
}

/// Closed-threshold acceptance: `score >= threshold`.
pub fn accept_pose(report: &ConfidenceReport, threshold: f64) -> bool {
    report.score >= threshold
}

// --- file formats -----------------------------------------------------------

/// Pose file: `{"rotation": [9 row-major], "translation": [3]}`.
#[derive(Serialize, Deserialize)]
struct PoseDoc {
    rotation: Vec<f64>,
    translation: [f64; 3],
}

pub fn load_pose_json(path: &Path) -> Result<RigidTransform, ConfidenceError> {
    let bytes = std::fs::read(path)?;
    let doc: PoseDoc = serde_json::from_slice(&bytes)
        .map_err(|e| ConfidenceError::Parse(format!("{}: {e}", path.display())))?;
    if doc.rotation.len() != 9 {
        return Err(ConfidenceError::Parse(format!(
            "{}: rotation has {} entries, expected 9",
            path.display(),
            doc.rotation.len()
        )));
    }
    let rot = nalgebra::Matrix3::from_row_slice(&doc.rotation);
    RigidTransform::new(rot, Vector3::from_column_slice(&doc.translation)).map_err(
        |e: GeometryError| ConfidenceError::Parse(format!("{}: {e}", path.display())),
    )
}

pub fn save_pose_json(path: &Path, pose: &RigidTransform) -> Result<(), ConfidenceError> {
    let doc = PoseDoc {
        rotation: pose.rotation.transpose().iter().cloned().collect(),
        translation: [pose.translation.x, pose.translation.y, pose.translation.z],
    };
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| ConfidenceError::Parse(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Intrinsics file: `{"fx": .., "fy": .., "cx": .., "cy": ..}`.
pub fn load_intrinsics_json(path: &Path) -> Result<CameraIntrinsics, ConfidenceError> {
    let bytes = std::fs::read(path)?;
    let cam: CameraIntrinsics = serde_json::from_slice(&bytes)
        .map_err(|e| ConfidenceError::Parse(format!("{}: {e}", path.display())))?;
    if cam.fx <= 0.0 || cam.fy <= 0.0 {
        return Err(ConfidenceError::Parse(format!(
            "{}: focal lengths must be positive",
            path.display()
        )));
    }
    Ok(cam)
}

/// Correspondence CSV with header `u,v,X,Y,Z` or `u,v,X,Y,Z,w`. Weights, when
/// present, are normalized to sum to one on ingest.
pub fn load_correspondences_csv(path: &Path) -> Result<Vec<Correspondence>, ConfidenceError> {
    let text = std::fs::read_to_string(path)?;
    parse_correspondences_csv(&text)
        .map_err(|e| ConfidenceError::Parse(format!("{}: {e}", path.display())))
}

fn parse_correspondences_csv(text: &str) -> Result<Vec<Correspondence>, String> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or("empty file")?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let with_weight = match cols.as_slice() {
        ["u", "v", "X", "Y", "Z"] => false,
        ["u", "v", "X", "Y", "Z", "w"] => true,
        _ => return Err(format!("unexpected header `{header}`")),
    };

    let mut corrs = Vec::new();
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let expected = if with_weight { 6 } else { 5 };
        if fields.len() != expected {
            return Err(format!("line {}: {} fields, expected {expected}", lineno + 1, fields.len()));
        }
        let num = |i: usize| -> Result<f64, String> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| format!("line {}: field {}: {e}", lineno + 1, i + 1))
        };
        let weight = if with_weight { num(5)? } else { 1.0 };
        if !(weight >= 0.0) {
            return Err(format!("line {}: negative weight", lineno + 1));
        }
        corrs.push(Correspondence {
            pixel: (num(0)?, num(1)?),
            object_point: Point3::new(num(2)?, num(3)?, num(4)?),
            weight,
        });
    }
    if corrs.is_empty() {
        return Err("no correspondences".into());
    }
    let total: f64 = corrs.iter().map(|c| c.weight).sum();
    if total <= 0.0 {
        return Err("weights sum to zero".into());
    }
    for c in &mut corrs {
        c.weight /= total;
    }
    Ok(corrs)
}

/// Write correspondences with the `u,v,X,Y,Z,w` header.
pub fn save_correspondences_csv(
    path: &Path,
    corrs: &[Correspondence],
) -> Result<(), ConfidenceError> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "u,v,X,Y,Z,w")?;
    for c in corrs {
        writeln!(
            f,
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            c.pixel.0, c.pixel.1, c.object_point.x, c.object_point.y, c.object_point.z, c.weight
        )?;
    }
    Ok(())
}
