//! The shape template: per-cluster GP distance fields assembled into a
//! mixture, calibrated on held-out points, queried for point likelihoods,
//! reconstructed into clouds, and serialized as versioned JSON.

use crate::clustering::{self, ClusterAssignment};
use crate::dataprep::{fibonacci_directions, Normalization, SurfacePointCloud};
use crate::geometry::{
    self, direction_params_of, from_spherical, to_spherical, GeometryError, Point3,
    ReferencePoint, RigidTransform, SphericalSample,
};
use crate::gp::{self, DistanceMode, GpModel, KernelConfig, KernelKind, OptimizerConfig};
use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const TEMPLATE_FORMAT_VERSION: u32 = 1;
/// Calibrated variances are floored here to keep densities finite.
pub const SIGMA2_FLOOR: f64 = 1e-12;
/// Clusters smaller than this cannot support a distance field.
pub const MIN_CLUSTER_SIZE: usize = 4;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error(transparent)]
    Clustering(#[from] clustering::ClusteringError),
    #[error(transparent)]
    Gp(#[from] gp::GpError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("cluster {index} has {size} training points, need at least {MIN_CLUSTER_SIZE}")]
    ClusterTooSmall { index: usize, size: usize },
    #[error("test cloud is empty")]
    EmptyTestCloud,
    #[error("template format version {found}, expected {TEMPLATE_FORMAT_VERSION}")]
    SchemaVersionMismatch { found: u32 },
    #[error("corrupt template: {0}")]
    CorruptTemplate(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// How reference points are chosen for a build.
#[derive(Debug, Clone)]
pub enum RefSelection {
    /// k-means with the given number of clusters.
    KMeans { k: usize },
    /// User-supplied reference points.
    Manual(Vec<Point3>),
}

/// Everything `build_template` needs besides the data.
#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub refs: RefSelection,
    pub kernel: KernelKind,
    pub distance_mode: DistanceMode,
    pub overlap_rho: f64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub kmeans_max_iters: usize,
}

impl BuildConfig {
    pub fn new(k: usize) -> Self {
        BuildConfig {
            refs: RefSelection::KMeans { k },
            kernel: KernelKind::RationalQuadratic,
            distance_mode: DistanceMode::BearingEuclidean,
            overlap_rho: clustering::DEFAULT_OVERLAP,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            kmeans_max_iters: 100,
        }
    }
}

/// The persisted artifact: K reference points, K fitted GP distance fields,
/// per-cluster calibrated variances, and the normalization back to source
/// units.
///
/// For templates loaded from disk, `assignment.memberships` are empty; the
/// training samples themselves live inside each model.
#[derive(Debug, Clone)]
pub struct ShapeTemplate {
    pub assignment: ClusterAssignment,
    pub models: Vec<GpModel>,
    pub calibrated_sigma2: Vec<f64>,
    pub normalization: Normalization,
    pub format_version: u32,
}

/// Per-cluster contribution to a likelihood query.
#[derive(Debug, Clone, Copy)]
pub struct ClusterLikelihood {
    /// Softmax weight `pi_k`; the per-query weights sum to one.
    pub weight: f64,
    /// Gaussian density of the radial residual under the calibrated variance.
    pub density: f64,
    /// Signed radial residual `||p - C_k|| - mu_k`.
    pub residual: f64,
}

/// Full evaluation of one query point against the template.
#[derive(Debug, Clone)]
pub struct LikelihoodQuery {
    pub point: Point3,
    pub per_cluster: Vec<ClusterLikelihood>,
    /// Cluster with the highest density.
    pub best_cluster: usize,
    /// That highest density; the quantity aggregated by pose scoring.
    pub max_density: f64,
    /// Weighted mixture value `sum_k pi_k q_k`.
    pub mixture: f64,
}

/// Gaussian density with the given variance, evaluated at a residual.
pub fn gaussian_density(residual: f64, sigma2: f64) -> f64 {
    let s2 = sigma2.max(SIGMA2_FLOOR);
    (-residual * residual / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt()
}

impl ShapeTemplate {
    pub fn k(&self) -> usize {
        self.models.len()
    }

    pub fn reference_points(&self) -> &[ReferencePoint] {
        &self.assignment.reference_points
    }

    /// Fraction of training points carried by each cluster.
    pub fn training_shares(&self) -> Vec<f64> {
        let total: usize = self.models.iter().map(|m| m.len()).sum();
        self.models.iter().map(|m| m.len() as f64 / total as f64).collect()
    }

    /// Softmax weights `pi_k` of Eq.-(9) form for a query point.
    pub fn mixture_weights(&self, p: &Point3) -> Vec<f64> {
        let exponents: Vec<f64> = self
            .reference_points()
            .iter()
            .zip(&self.assignment.q_matrices)
            .map(|(r, q)| {
                let d = *p - r.center;
                -(d.transpose() * q * d)[(0, 0)]
            })
            .collect();
        let max = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = exponents.iter().map(|e| (e - max).exp()).collect();
        let sum: f64 = unnorm.iter().sum();
        unnorm.into_iter().map(|w| w / sum).collect()
    }

    /// Evaluate per-cluster densities, softmax weights, the mixture value,
    /// and the max density for a point in the template's object frame.
    pub fn point_likelihood(&self, p: &Point3) -> Result<LikelihoodQuery, TemplateError> {
        let weights = self.mixture_weights(p);
        let mut per_cluster = Vec::with_capacity(self.k());
        let mut best_cluster = 0;
        let mut max_density = f64::NEG_INFINITY;
        let mut mixture = 0.0;
        for (k, (model, r)) in self.models.iter().zip(self.reference_points()).enumerate() {
            let s = to_spherical(p, r)?;
            let mu = model.predict_mean(&s.direction_params());
            let residual = s.distance - mu;
            let density = gaussian_density(residual, self.calibrated_sigma2[k]);
            if density > max_density {
                max_density = density;
                best_cluster = k;
            }
            mixture += weights[k] * density;
            per_cluster.push(ClusterLikelihood { weight: weights[k], density, residual });
        }
        Ok(LikelihoodQuery { point: *p, per_cluster, best_cluster, max_density, mixture })
    }

    /// Query a Fibonacci direction grid from every reference point and keep
    /// each predicted surface point only if its generating center is nearest.
    pub fn reconstruct(&self, directions_per_cluster: usize) -> SurfacePointCloud {
        let mut points = Vec::new();
        if directions_per_cluster > 0 {
            let dirs = fibonacci_directions(directions_per_cluster);
            for (k, (model, r)) in self.models.iter().zip(self.reference_points()).enumerate() {
                for dir in &dirs {
                    let psi = direction_params_of(dir);
                    let mu = model.predict_mean(&psi);
                    let p = from_spherical(&SphericalSample::new(psi[0], psi[1], mu), r);
                    let own_d2 = p.distance_squared(&r.center);
                    let owned = self
                        .reference_points()
                        .iter()
                        .enumerate()
                        .all(|(l, other)| l == k || p.distance_squared(&other.center) >= own_d2);
                    if owned {
                        points.push(p);
                    }
                }
            }
        }
        SurfacePointCloud { points, normalization: self.normalization }
    }

    /// Re-anchor the template in a rigidly moved object frame. With the
    /// bearing distance mode this is an exact equivalence: Gram matrices are
    /// invariant under joint rotation of all bearings.
    pub fn transformed(&self, t: &RigidTransform) -> Result<ShapeTemplate, TemplateError> {
        let mut models = Vec::with_capacity(self.k());
        for model in &self.models {
            let inputs: Vec<[f64; 2]> = model
                .train_inputs
                .iter()
                .map(|psi| {
                    let u = geometry::bearing_vector(psi[0], psi[1]);
                    direction_params_of(&(t.rotation * u))
                })
                .collect();
            models.push(GpModel::from_parts(
                model.kernel,
                inputs,
                model.train_targets.clone(),
            )?);
        }
        let reference_points = self
            .reference_points()
            .iter()
            .map(|r| ReferencePoint::new(geometry::apply_transform(t, &r.center), r.index))
            .collect();
        let q_matrices = self
            .assignment
            .q_matrices
            .iter()
            .map(|q| t.rotation * q * t.rotation.transpose())
            .collect();
        Ok(ShapeTemplate {
            assignment: ClusterAssignment {
                reference_points,
                memberships: self.assignment.memberships.clone(),
                q_matrices,
                inertia_history: Vec::new(),
            },
            models,
            calibrated_sigma2: self.calibrated_sigma2.clone(),
            normalization: self.normalization,
            format_version: self.format_version,
        })
    }
}

/// Off-line pipeline: cluster the training cloud, impose overlap,
/// parameterize each cluster radially, fit the per-cluster GPs, and
/// calibrate variances on the held-out test cloud. Deterministic per seed.
pub fn build_template(
    train: &SurfacePointCloud,
    test: &SurfacePointCloud,
    cfg: &BuildConfig,
) -> Result<ShapeTemplate, TemplateError> {
    let base = match &cfg.refs {
        RefSelection::KMeans { k } => {
            clustering::kmeans(train, *k, cfg.seed, cfg.kmeans_max_iters)?
        }
        RefSelection::Manual(centers) => clustering::manual_reference_points(train, centers)?,
    };
    let assignment = clustering::apply_overlap(&base, train, cfg.overlap_rho);

    for (index, members) in assignment.memberships.iter().enumerate() {
        if members.len() < MIN_CLUSTER_SIZE {
            return Err(TemplateError::ClusterTooSmall { index, size: members.len() });
        }
    }

    // Radial parameterization per cluster.
    let mut cluster_data = Vec::with_capacity(assignment.k());
    for (r, members) in assignment.reference_points.iter().zip(&assignment.memberships) {
        let mut inputs = Vec::with_capacity(members.len());
        let mut targets = Vec::with_capacity(members.len());
        for &i in members {
            let s = to_spherical(&train.points[i], r)?;
            inputs.push(s.direction_params());
            targets.push(s.distance);
        }
        cluster_data.push((inputs, targets));
    }

    // Fits are independent; order of results is fixed by cluster index.
    let results: Vec<Result<GpModel, gp::GpError>> = cluster_data
        .par_iter()
        .map(|(inputs, targets)| {
            gp::fit(inputs, targets, cfg.kernel, cfg.distance_mode, &cfg.optimizer)
        })
        .collect();
    let mut models = Vec::with_capacity(results.len());
    for r in results {
        models.push(r?);
    }

    let mut template = ShapeTemplate {
        assignment,
        calibrated_sigma2: vec![1.0; models.len()],
        models,
        normalization: train.normalization,
        format_version: TEMPLATE_FORMAT_VERSION,
    };
    template.calibrated_sigma2 = calibrate_variance(&template, test)?;
    Ok(template)
}

/// Per-cluster mean squared deviation of GP predictions from held-out
/// distances; each test point is evaluated against its nearest reference
/// point. Clusters with no test points fall back to the global mean.
pub fn calibrate_variance(
    template: &ShapeTemplate,
    test: &SurfacePointCloud,
) -> Result<Vec<f64>, TemplateError> {
    if test.is_empty() {
        return Err(TemplateError::EmptyTestCloud);
    }
    let refs = template.reference_points();
    let mut sq_sum = vec![0.0f64; template.k()];
    let mut count = vec![0usize; template.k()];
    for p in &test.points {
        let (nearest, _) = refs
            .iter()
            .map(|r| p.distance_squared(&r.center))
            .enumerate()
            .min_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .expect("at least one cluster");
        let s = to_spherical(p, &refs[nearest])?;
        let mu = template.models[nearest].predict_mean(&s.direction_params());
        let dev = mu - s.distance;
        sq_sum[nearest] += dev * dev;
        count[nearest] += 1;
    }
    let global = sq_sum.iter().sum::<f64>() / count.iter().sum::<usize>() as f64;
    Ok((0..template.k())
        .map(|k| {
            if count[k] == 0 {
                log::warn!("cluster {k} has no test points; using global mean squared deviation");
                global.max(SIGMA2_FLOOR)
            } else {
                (sq_sum[k] / count[k] as f64).max(SIGMA2_FLOOR)
            }
        })
        .collect())
}

// --- serialization ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TemplateDoc {
    format_version: u32,
    normalization: NormalizationDoc,
    clusters: Vec<ClusterDoc>,
}

#[derive(Serialize, Deserialize)]
struct NormalizationDoc {
    center: [f64; 3],
    scale: f64,
}

#[derive(Serialize, Deserialize)]
struct ClusterDoc {
    center: [f64; 3],
    q_matrix: Vec<f64>,
    kernel: KernelConfig,
    train_psi: Vec<[f64; 2]>,
    train_d: Vec<f64>,
    calibrated_sigma2: f64,
}

/// `serde_json` formatter that writes every float with 17 significant
/// decimal digits, enough to reproduce any f64 exactly on load.
struct SigDigitFormatter;

impl serde_json::ser::Formatter for SigDigitFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serialize a template to the versioned JSON document.
pub fn to_json(template: &ShapeTemplate) -> Result<Vec<u8>, TemplateError> {
    let doc = TemplateDoc {
        format_version: template.format_version,
        normalization: NormalizationDoc {
            center: template.normalization.center.into(),
            scale: template.normalization.scale,
        },
        clusters: template
            .models
            .iter()
            .enumerate()
            .map(|(k, model)| ClusterDoc {
                center: template.assignment.reference_points[k].center.into(),
                q_matrix: template.assignment.q_matrices[k]
                    .transpose()
                    .iter()
                    .cloned()
                    .collect(), // row-major

                kernel: model.kernel,
                train_psi: model.train_inputs.clone(),
                train_d: model.train_targets.clone(),
                calibrated_sigma2: template.calibrated_sigma2[k],
            })
            .collect(),
    };
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigDigitFormatter);
    doc.serialize(&mut ser)
        .map_err(|e| TemplateError::CorruptTemplate(e.to_string()))?;
    buf.push(b'\n');
    Ok(buf)
}

/// Rebuild a template from the JSON document. Gram factors are recomputed
/// from the stored hyperparameters and training data.
pub fn from_json(bytes: &[u8]) -> Result<ShapeTemplate, TemplateError> {
    // Version is checked before strict decoding so old files fail clearly.
    #[derive(Deserialize)]
    struct VersionProbe {
        format_version: u32,
    }
    let probe: VersionProbe = serde_json::from_slice(bytes)
        .map_err(|e| TemplateError::CorruptTemplate(e.to_string()))?;
    if probe.format_version != TEMPLATE_FORMAT_VERSION {
        return Err(TemplateError::SchemaVersionMismatch { found: probe.format_version });
    }
    let doc: TemplateDoc = serde_json::from_slice(bytes)
        .map_err(|e| TemplateError::CorruptTemplate(e.to_string()))?;

    if doc.clusters.is_empty() {
        return Err(TemplateError::CorruptTemplate("no clusters".into()));
    }
    let mut reference_points = Vec::new();
    let mut q_matrices = Vec::new();
    let mut models = Vec::new();
    let mut calibrated_sigma2 = Vec::new();
    for (k, c) in doc.clusters.into_iter().enumerate() {
        if c.q_matrix.len() != 9 {
            return Err(TemplateError::CorruptTemplate(format!(
                "cluster {k}: q_matrix has {} entries",
                c.q_matrix.len()
            )));
        }
        if c.train_psi.len() != c.train_d.len() || c.train_psi.is_empty() {
            return Err(TemplateError::CorruptTemplate(format!(
                "cluster {k}: {} inputs vs {} targets",
                c.train_psi.len(),
                c.train_d.len()
            )));
        }
        if !(c.calibrated_sigma2.is_finite() && c.calibrated_sigma2 > 0.0) {
            return Err(TemplateError::CorruptTemplate(format!(
                "cluster {k}: calibrated_sigma2 = {}",
                c.calibrated_sigma2
            )));
        }
        reference_points.push(ReferencePoint::new(c.center.into(), k));
        q_matrices.push(Matrix3::from_row_slice(&c.q_matrix));
        models.push(GpModel::from_parts(c.kernel, c.train_psi, c.train_d)?);
        calibrated_sigma2.push(c.calibrated_sigma2);
    }
    let k = models.len();
    Ok(ShapeTemplate {
        assignment: ClusterAssignment {
            reference_points,
            memberships: vec![Vec::new(); k],
            q_matrices,
            inertia_history: Vec::new(),
        },
        models,
        calibrated_sigma2,
        normalization: Normalization {
            center: doc.normalization.center.into(),
            scale: doc.normalization.scale,
        },
        format_version: doc.format_version,
    })
}

pub fn save(template: &ShapeTemplate, path: &Path) -> Result<(), TemplateError> {
    let bytes = to_json(template)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ShapeTemplate, TemplateError> {
    let bytes = std::fs::read(path)?;
    from_json(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere_template(n_train: usize, k: usize, seed: u64) -> ShapeTemplate {
        let train = shapes::sphere_cloud(n_train);
        let test = shapes::perturbed_sphere_cloud(n_train, 0.0); // also radius 1
        let mut cfg = BuildConfig::new(k);
        cfg.seed = seed;
        cfg.optimizer.iterations = 60;
        build_template(&train, &test, &cfg).unwrap()
    }

    // Analytic sphere oracle: predicted distance is 1 in every direction.
    #[test]
    fn sphere_template_k1_radial_error() {
        let template = sphere_template(500, 1, 0);
        let dirs = fibonacci_directions(400);
        let mean_err: f64 = dirs
            .iter()
            .map(|d| {
                let psi = direction_params_of(d);
                (template.models[0].predict_mean(&psi) - 1.0).abs()
            })
            .sum::<f64>()
            / dirs.len() as f64;
        assert!(mean_err < 1e-2, "mean radial error {mean_err}");
    }

    #[test]
    fn k1_weight_is_one() {
        let template = sphere_template(200, 1, 0);
        let q = template.point_likelihood(&Point3::new(0.3, 0.4, 0.5)).unwrap();
        assert_eq!(q.per_cluster.len(), 1);
        assert_abs_diff_eq!(q.per_cluster[0].weight, 1.0, epsilon = 1e-15);
        assert_eq!(template.mixture_weights(&Point3::new(0.1, 0.0, 0.0)), vec![1.0]);
    }

    #[test]
    fn build_is_deterministic_bytes() {
        let a = sphere_template(150, 2, 9);
        let b = sphere_template(150, 2, 9);
        assert_eq!(to_json(&a).unwrap(), to_json(&b).unwrap());
    }

    #[test]
    fn equidistant_point_weights_half() {
        let template = sphere_template(200, 1, 0);
        // Graft a second symmetric cluster to probe the softmax directly.
        let mut t = template.clone();
        t.assignment.reference_points = vec![
            ReferencePoint::new(Point3::new(-0.5, 0.0, 0.0), 0),
            ReferencePoint::new(Point3::new(0.5, 0.0, 0.0), 1),
        ];
        t.assignment.q_matrices = vec![Matrix3::identity(); 2];
        let w = t.mixture_weights(&Point3::new(0.0, 0.7, 0.0));
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 0.5, epsilon = 1e-12);
    }

    // Independent scalar re-evaluation of the softmax formula.
    #[test]
    fn mixture_weights_match_direct_formula() {
        let train = shapes::cube_cloud(400, 0.5, 3);
        let test = shapes::cube_cloud(300, 0.5, 4);
        let mut cfg = BuildConfig::new(4);
        cfg.optimizer.iterations = 40;
        let template = build_template(&train, &test, &cfg).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let p = Point3::new(
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
            );
            let w = template.mixture_weights(&p);
            // Direct evaluation without the max-shift trick.
            let raw: Vec<f64> = template
                .reference_points()
                .iter()
                .map(|r| (-p.distance_squared(&r.center)).exp())
                .collect();
            let total: f64 = raw.iter().sum();
            assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            for (wi, ri) in w.iter().zip(&raw) {
                assert_abs_diff_eq!(*wi, ri / total, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn likelihood_peak_and_falloff() {
        let template = sphere_template(300, 1, 1);
        let r = template.reference_points()[0];
        let sigma2 = template.calibrated_sigma2[0];
        let sigma = sigma2.sqrt();

        // Place a query exactly on the predicted surface along +x.
        let psi = direction_params_of(&Vector3::x());
        let mu = template.models[0].predict_mean(&psi);
        let on_surface = from_spherical(&SphericalSample::new(psi[0], psi[1], mu), &r);
        let q = template.point_likelihood(&on_surface).unwrap();
        let peak = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
        assert_abs_diff_eq!(q.max_density, peak, epsilon = 1e-6 * peak);

        // Displace radially by 3 sigma.
        let off = from_spherical(&SphericalSample::new(psi[0], psi[1], mu + 3.0 * sigma), &r);
        let q3 = template.point_likelihood(&off).unwrap();
        assert_abs_diff_eq!(
            q3.max_density,
            peak * (-4.5f64).exp(),
            epsilon = 1e-6 * peak
        );
    }

    // Mixture value equals the independently recomputed weighted sum.
    #[test]
    fn mixture_value_matches_recomputation() {
        let train = shapes::cube_cloud(400, 0.5, 5);
        let test = shapes::cube_cloud(300, 0.5, 6);
        let mut cfg = BuildConfig::new(3);
        cfg.optimizer.iterations = 40;
        let template = build_template(&train, &test, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..30 {
            let p = Point3::new(
                rng.gen_range(-0.7..0.7),
                rng.gen_range(-0.7..0.7),
                rng.gen_range(-0.7..0.7),
            );
            let q = template.point_likelihood(&p).unwrap();
            let recomputed: f64 =
                q.per_cluster.iter().map(|c| c.weight * c.density).sum();
            assert_abs_diff_eq!(q.mixture, recomputed, epsilon = 1e-12 * recomputed.max(1.0));
            assert!(q.mixture <= q.max_density + 1e-12 * q.max_density);
            let max_again = q
                .per_cluster
                .iter()
                .map(|c| c.density)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(q.max_density, max_again);
        }
    }

    #[test]
    fn reconstruct_sphere_radius() {
        let template = sphere_template(500, 1, 2);
        let cloud = template.reconstruct(2000);
        assert_eq!(cloud.len(), 2000);
        for p in &cloud.points {
            let r = p.to_vector().norm();
            assert!((r - 1.0).abs() < 1e-2, "radius {r}");
        }
        assert!(template.reconstruct(0).is_empty());
    }

    #[test]
    fn reconstruct_ownership_rule() {
        let train = shapes::cube_cloud(500, 0.5, 11);
        let test = shapes::cube_cloud(300, 0.5, 12);
        let mut cfg = BuildConfig::new(4);
        cfg.optimizer.iterations = 40;
        let template = build_template(&train, &test, &cfg).unwrap();
        let cloud = template.reconstruct(200);
        for p in &cloud.points {
            // Nearest reference point must tie or beat every other.
            let dists: Vec<f64> = template
                .reference_points()
                .iter()
                .map(|r| p.distance(&r.center))
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(dists.iter().any(|d| *d <= min + 1e-12));
        }
    }

    #[test]
    fn calibration_definition_and_fallback() {
        let template = sphere_template(300, 1, 3);
        // Constant prediction error: test cloud at radius 1 + e.
        let e = 0.05;
        let test = SurfacePointCloud::new(
            fibonacci_directions(100)
                .into_iter()
                .map(|d| Point3::from_vector(d * (1.0 + e)))
                .collect(),
        );
        let sigma2 = calibrate_variance(&template, &test).unwrap();
        // Prediction error is e plus the template's own small radial error.
        assert!((sigma2[0].sqrt() - e).abs() < 5e-3, "sigma {} vs e {e}", sigma2[0].sqrt());

        assert!(matches!(
            calibrate_variance(&template, &SurfacePointCloud::new(vec![])),
            Err(TemplateError::EmptyTestCloud)
        ));
    }

    // Brute-force recomputation of the calibrated variances from stored
    // predictions.
    #[test]
    fn calibration_matches_recomputation() {
        let train = shapes::cube_cloud(400, 0.5, 13);
        let test = shapes::cube_cloud(250, 0.5, 14);
        let mut cfg = BuildConfig::new(3);
        cfg.optimizer.iterations = 40;
        let template = build_template(&train, &test, &cfg).unwrap();

        let mut sums = vec![(0.0f64, 0usize); template.k()];
        for p in &test.points {
            let (nearest, _) = template
                .reference_points()
                .iter()
                .map(|r| p.distance_squared(&r.center))
                .enumerate()
                .min_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .unwrap();
            let s = to_spherical(p, &template.reference_points()[nearest]).unwrap();
            let mu = template.models[nearest].predict_mean(&s.direction_params());
            sums[nearest].0 += (mu - s.distance) * (mu - s.distance);
            sums[nearest].1 += 1;
        }
        for (k, (sq, n)) in sums.iter().enumerate() {
            if *n > 0 {
                let expect = (sq / *n as f64).max(SIGMA2_FLOOR);
                assert_abs_diff_eq!(template.calibrated_sigma2[k], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cluster_too_small_detected() {
        let train = shapes::sphere_cloud(6);
        let test = shapes::sphere_cloud(10);
        let cfg = BuildConfig::new(3);
        match build_template(&train, &test, &cfg) {
            Err(TemplateError::ClusterTooSmall { .. }) => {}
            other => panic!("expected ClusterTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip_exact_predictions() {
        let template = sphere_template(200, 2, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        save(&template, &path).unwrap();
        let loaded = load(&path).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..50 {
            let p = Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let a = template.point_likelihood(&p).unwrap();
            let b = loaded.point_likelihood(&p).unwrap();
            assert_abs_diff_eq!(a.max_density, b.max_density, epsilon = 1e-12);
            assert_abs_diff_eq!(a.mixture, b.mixture, epsilon = 1e-12);
        }
        // Save of the loaded template is byte-identical.
        assert_eq!(to_json(&template).unwrap(), to_json(&loaded).unwrap());
    }

    #[test]
    fn corrupt_and_versioned_files_rejected() {
        let template = sphere_template(100, 1, 5);
        let bytes = to_json(&template).unwrap();

        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(
            from_json(truncated),
            Err(TemplateError::CorruptTemplate(_))
        ));

        let text = String::from_utf8(bytes).unwrap();
        let v0 = text.replace("\"format_version\":1", "\"format_version\":0");
        assert!(matches!(
            from_json(v0.as_bytes()),
            Err(TemplateError::SchemaVersionMismatch { found: 0 })
        ));
    }

    // Densities are invariant under a rigid motion applied jointly to the
    // query point and the template.
    #[test]
    fn likelihood_rigid_invariance() {
        let template = sphere_template(250, 2, 6);
        let rot = nalgebra::Rotation3::from_euler_angles(0.4, -0.8, 1.3);
        let t = RigidTransform::new(rot.into(), Vector3::new(0.3, -1.0, 2.0)).unwrap();
        let moved = template.transformed(&t).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..40 {
            let p = Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let q1 = template.point_likelihood(&p).unwrap();
            let q2 = moved.point_likelihood(&geometry::apply_transform(&t, &p)).unwrap();
            assert_abs_diff_eq!(q1.max_density, q2.max_density, epsilon = 1e-9 * q1.max_density.max(1.0));
            assert_abs_diff_eq!(q1.mixture, q2.mixture, epsilon = 1e-9 * q1.mixture.max(1.0));
            assert_eq!(q1.best_cluster, q2.best_cluster);
        }
    }

    #[test]
    fn seventeen_digit_floats_in_file() {
        let template = sphere_template(50, 1, 7);
        let text = String::from_utf8(to_json(&template).unwrap()).unwrap();
        // Every float is rendered in scientific notation with 16 fractional
        // digits (17 significant).
        assert!(text.contains("e0") || text.contains("e-"));
        let sample = text
            .split("\"scale\":")
            .nth(1)
            .and_then(|s| s.split(&[',', '}'][..]).next())
            .unwrap();
        let mantissa = sample.split('e').next().unwrap();
        let digits = mantissa.chars().filter(|c| c.is_ascii_digit()).count();
        assert!(digits >= 17, "scale rendered as {sample}");
    }
}
