//! Exact Gaussian-process regression of surface distance on direction.
//!
//! A [`GpModel`] holds one cluster's direction inputs and distance targets,
//! the kernel with its learned log-hyperparameters, and the cached Cholesky
//! factor of the noisy Gram matrix. [`fit`] minimizes the negative marginal
//! log likelihood with Adam (analytic gradients, reduce-on-plateau schedule)
//! and returns the best iterate seen.
//!
//! Targets are divided by their mean before training so the unit-signal
//! kernels see O(1) data; predictions are rescaled on the way out.

pub mod kernel;

pub use kernel::{kernel_eval, DistanceMode, KernelConfig, KernelKind, ParamId};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Base jitter added to the Gram diagonal, as a fraction of its mean.
const JITTER_BASE: f64 = 1e-8;
/// Largest jitter fraction tried before giving up.
const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("{inputs} inputs vs {targets} targets")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error("non-finite training target")]
    NonFiniteTarget,
    #[error("Gram matrix is not positive definite (jitter escalated to {0:.1e} of mean diagonal)")]
    NotPositiveDefinite(f64),
    #[error("loss was non-finite at initialization")]
    NonFiniteLoss,
}

/// Posterior prediction. `mean` is clamped at zero (distances cannot be
/// negative); `variance` is in squared target units and floored at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

/// Adam settings with the reduce-on-plateau schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.1,
            iterations: 250,
            plateau_factor: 0.1,
            plateau_patience: 10,
        }
    }
}

/// A fitted GP over one cluster's directional distance samples.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub kernel: KernelConfig,
    /// Direction parameter vectors `(phi, theta)` of the training points.
    pub train_inputs: Vec<[f64; 2]>,
    /// Raw surface distances.
    pub train_targets: Vec<f64>,
    /// Mean of the raw targets; the internal target unit.
    pub target_scale: f64,
    /// NMLL of the scaled targets at the fitted hyperparameters.
    pub final_nmll: f64,
    /// Jitter actually added to the Gram diagonal.
    pub jitter: f64,
    features: Vec<[f64; 3]>,
    chol_l: DMatrix<f64>,
    alpha_vec: DVector<f64>,
}

impl GpModel {
    /// Build a model from data and explicit hyperparameters, without
    /// optimization. Used by `fit` for its final iterate and by template
    /// deserialization.
    pub fn from_parts(
        cfg: KernelConfig,
        inputs: Vec<[f64; 2]>,
        targets: Vec<f64>,
    ) -> Result<GpModel, GpError> {
        validate(&inputs, &targets)?;
        let features: Vec<[f64; 3]> = inputs.iter().map(|psi| cfg.feature(psi)).collect();
        let target_scale = target_scale_of(&targets);
        let scaled: Vec<f64> = targets.iter().map(|d| d / target_scale).collect();

        let gram = gram_matrix(&cfg, &features);
        let (chol_l, jitter) = factorize(&cfg, &gram)?;
        let y = DVector::from_column_slice(&scaled);
        let alpha_vec = cholesky_solve(&chol_l, &y);
        let final_nmll = nmll_from_factor(&chol_l, &y, &alpha_vec);

        Ok(GpModel {
            kernel: cfg,
            train_inputs: inputs,
            train_targets: targets,
            target_scale,
            final_nmll,
            jitter,
            features,
            chol_l,
            alpha_vec,
        })
    }

    pub fn len(&self) -> usize {
        self.train_inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_inputs.is_empty()
    }

    /// Lower Cholesky factor of `K + (sigma^2 + jitter) I`.
    pub fn chol_lower(&self) -> &DMatrix<f64> {
        &self.chol_l
    }

    /// `(K + sigma^2 I)^-1 y` for the scaled targets.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha_vec
    }

    /// Posterior mean only; the cheap path used by likelihood queries and
    /// reconstruction, which never need the posterior variance.
    pub fn predict_mean(&self, psi: &[f64; 2]) -> f64 {
        let fx = self.kernel.feature(psi);
        let mut mean = 0.0;
        for (f, a) in self.features.iter().zip(self.alpha_vec.iter()) {
            mean += self.kernel.k_from_stat(self.kernel.pair_stat(&fx, f)) * a;
        }
        (mean * self.target_scale).max(0.0)
    }

    /// Posterior mean and variance.
    pub fn predict(&self, psi: &[f64; 2]) -> Prediction {
        let fx = self.kernel.feature(psi);
        let n = self.len();
        let mut kx = DVector::zeros(n);
        for (i, f) in self.features.iter().enumerate() {
            kx[i] = self.kernel.k_from_stat(self.kernel.pair_stat(&fx, f));
        }
        let mean = (kx.dot(&self.alpha_vec) * self.target_scale).max(0.0);

        let kxx = self.kernel.k_from_stat(self.kernel.pair_stat(&fx, &fx));
        let v = self
            .chol_l
            .solve_lower_triangular(&kx)
            .expect("cholesky factor is nonsingular");
        let variance = (kxx - v.norm_squared()).max(0.0) * self.target_scale * self.target_scale;
        Prediction { mean, variance }
    }
}

fn validate(inputs: &[[f64; 2]], targets: &[f64]) -> Result<(), GpError> {
    if inputs.is_empty() {
        return Err(GpError::EmptyTrainingSet);
    }
    if inputs.len() != targets.len() {
        return Err(GpError::LengthMismatch { inputs: inputs.len(), targets: targets.len() });
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(GpError::NonFiniteTarget);
    }
    Ok(())
}

fn target_scale_of(targets: &[f64]) -> f64 {
    let mean = targets.iter().map(|t| t.abs()).sum::<f64>() / targets.len() as f64;
    mean.max(1e-12)
}

/// Dense Gram matrix `K[i][j] = k(x_i, x_j)` (no noise, no jitter).
pub fn gram_matrix(cfg: &KernelConfig, features: &[[f64; 3]]) -> DMatrix<f64> {
    let n = features.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = cfg.k_from_stat(cfg.pair_stat(&features[i], &features[j]));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `K + (noise + jitter) I` with the escalating jitter policy:
/// start at 1e-8 of the mean diagonal and multiply by 10 until the
/// factorization succeeds, failing beyond 1e-4.
fn factorize(cfg: &KernelConfig, gram: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64), GpError> {
    let n = gram.nrows();
    let mean_diag = gram.diagonal().sum() / n as f64;
    let noise = cfg.noise_variance();
    let mut factor = JITTER_BASE;
    loop {
        let jitter = factor * mean_diag;
        let mut ky = gram.clone();
        for i in 0..n {
            ky[(i, i)] += noise + jitter;
        }
        if let Some(chol) = nalgebra::linalg::Cholesky::new(ky) {
            return Ok((chol.unpack(), jitter));
        }
        factor *= 10.0;
        if factor > JITTER_MAX * (1.0 + 1e-12) {
            return Err(GpError::NotPositiveDefinite(JITTER_MAX));
        }
        log::debug!("cholesky failed; escalating jitter to {factor:.1e} of mean diagonal");
    }
}

/// Solve `(L L^T) x = b` from the lower factor.
fn cholesky_solve(chol_l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = chol_l.solve_lower_triangular(b).expect("lower solve");
    chol_l.tr_solve_lower_triangular(&y).expect("upper solve")
}

fn nmll_from_factor(chol_l: &DMatrix<f64>, y: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let log_det_half: f64 = chol_l.diagonal().iter().map(|d| d.ln()).sum();
    0.5 * y.dot(alpha) + log_det_half + 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// Negative marginal log likelihood
/// `1/2 y^T (K + s^2 I)^-1 y + 1/2 log|K + s^2 I| + n/2 log 2pi`
/// evaluated on the targets as given (no internal rescaling), via the
/// Cholesky factor and the jitter policy of [`fit`].
pub fn nmll(inputs: &[[f64; 2]], targets: &[f64], cfg: &KernelConfig) -> Result<f64, GpError> {
    validate(inputs, targets)?;
    let features: Vec<[f64; 3]> = inputs.iter().map(|psi| cfg.feature(psi)).collect();
    let gram = gram_matrix(cfg, &features);
    let (chol_l, _) = factorize(cfg, &gram)?;
    let y = DVector::from_column_slice(targets);
    let alpha = cholesky_solve(&chol_l, &y);
    Ok(nmll_from_factor(&chol_l, &y, &alpha))
}

/// NMLL and its gradient with respect to the active log-hyperparameters.
///
/// Gradient entries follow `cfg.active_params()` order. Uses
/// `dNMLL/dtheta = 1/2 tr((Kinv - alpha alpha^T) dK/dtheta)`.
pub fn nmll_with_grad(
    features: &[[f64; 3]],
    targets: &DVector<f64>,
    cfg: &KernelConfig,
) -> Result<(f64, Vec<f64>), GpError> {
    let n = features.len();
    let gram = gram_matrix(cfg, features);
    let mean_diag = gram.diagonal().sum() / n as f64;
    let (chol_l, jitter) = factorize(cfg, &gram)?;
    let jitter_factor = jitter / mean_diag;

    let alpha = cholesky_solve(&chol_l, targets);
    let value = nmll_from_factor(&chol_l, targets, &alpha);

    // A = Kinv - alpha alpha^T; grad_m = 1/2 sum(A .* dK/dtheta_m).
    let ky_inv = nalgebra::linalg::Cholesky::pack_dirty(chol_l).inverse();
    let mut grads = Vec::with_capacity(cfg.active_params().len());
    for &param in cfg.active_params() {
        let mut acc = 0.0;
        let mut diag_dk_sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                let a_ij = ky_inv[(i, j)] - alpha[i] * alpha[j];
                let dk = match param {
                    ParamId::LogNoise => {
                        if i == j {
                            cfg.noise_variance()
                        } else {
                            0.0
                        }
                    }
                    ParamId::LogLengthscale => {
                        let stat = cfg.pair_stat(&features[i], &features[j]);
                        let d = cfg.dk_dlog_lengthscale(stat);
                        if i == j {
                            diag_dk_sum += d;
                        }
                        d
                    }
                    ParamId::LogAlpha => {
                        let stat = cfg.pair_stat(&features[i], &features[j]);
                        cfg.dk_dlog_alpha(stat)
                    }
                };
                acc += a_ij * dk;
            }
        }
        // The jitter is a fixed fraction of the mean Gram diagonal, which for
        // non-stationary kernels itself moves with the lengthscale.
        if param == ParamId::LogLengthscale && !cfg.kind.is_stationary() {
            let djitter = jitter_factor * diag_dk_sum / n as f64;
            let trace_a: f64 = (0..n).map(|i| ky_inv[(i, i)] - alpha[i] * alpha[i]).sum();
            acc += trace_a * djitter;
        }
        grads.push(0.5 * acc);
    }
    Ok((value, grads))
}

/// Data-driven hyperparameter initialization: lengthscale from the median
/// pairwise feature distance (deterministic subset of at most 500 points),
/// noise from the scaled target variance.
pub fn heuristic_config(
    kind: KernelKind,
    mode: DistanceMode,
    inputs: &[[f64; 2]],
    targets: &[f64],
) -> KernelConfig {
    let mut cfg = KernelConfig::new(kind).with_distance_mode(mode);
    let features: Vec<[f64; 3]> = inputs.iter().map(|psi| cfg.feature(psi)).collect();

    let stride = (features.len() / 500).max(1);
    let subset: Vec<&[f64; 3]> = features.iter().step_by(stride).collect();
    let mut dists = Vec::with_capacity(subset.len() * subset.len() / 2);
    for i in 0..subset.len() {
        for j in (i + 1)..subset.len() {
            let dx = subset[i][0] - subset[j][0];
            let dy = subset[i][1] - subset[j][1];
            let dz = subset[i][2] - subset[j][2];
            dists.push((dx * dx + dy * dy + dz * dz).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if dists.is_empty() { 1.0 } else { dists[dists.len() / 2] };
    cfg.log_lengthscale = median.max(1e-6).ln();
    cfg.log_alpha = 0.0;

    let scale = target_scale_of(targets);
    let scaled: Vec<f64> = targets.iter().map(|t| t / scale).collect();
    let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    let var = scaled.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / scaled.len() as f64;
    cfg.log_noise = (1e-4 * var + 1e-8).ln();
    cfg
}

/// Fit a GP by minimizing the NMLL of the scaled targets over the active
/// log-hyperparameters with Adam and a reduce-on-plateau schedule. Returns
/// the model at the best iterate seen, so the final NMLL never exceeds the
/// NMLL at initialization.
pub fn fit(
    inputs: &[[f64; 2]],
    targets: &[f64],
    kind: KernelKind,
    mode: DistanceMode,
    opt: &OptimizerConfig,
) -> Result<GpModel, GpError> {
    validate(inputs, targets)?;
    let mut cfg = heuristic_config(kind, mode, inputs, targets);
    let features: Vec<[f64; 3]> = inputs.iter().map(|psi| cfg.feature(psi)).collect();
    let scale = target_scale_of(targets);
    let y = DVector::from_iterator(targets.len(), targets.iter().map(|d| d / scale));

    let params = cfg.active_params();
    let dim = params.len();
    let mut m = vec![0.0; dim];
    let mut v = vec![0.0; dim];
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut lr = opt.learning_rate;

    let mut best_cfg = cfg;
    let mut best_loss = f64::INFINITY;
    let mut stale = 0usize;

    for t in 1..=opt.iterations {
        let (loss, grad) = nmll_with_grad(&features, &y, &cfg)?;
        if !loss.is_finite() {
            if best_loss.is_finite() {
                log::warn!("non-finite NMLL at iteration {t}; keeping best iterate");
                break;
            }
            return Err(GpError::NonFiniteLoss);
        }
        if loss < best_loss {
            best_loss = loss;
            best_cfg = cfg;
            stale = 0;
        } else {
            stale += 1;
            if stale >= opt.plateau_patience {
                lr *= opt.plateau_factor;
                stale = 0;
            }
        }

        for (i, &param) in params.iter().enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = m[i] / (1.0 - beta1.powi(t as i32));
            let v_hat = v[i] / (1.0 - beta2.powi(t as i32));
            cfg.set_param(param, cfg.get_param(param) - lr * m_hat / (v_hat.sqrt() + eps));
        }
    }
    // The last step is unevaluated; check it before settling on the best.
    if let Ok((loss, _)) = nmll_with_grad(&features, &y, &cfg) {
        if loss.is_finite() && loss < best_loss {
            best_cfg = cfg;
        }
    }

    GpModel::from_parts(best_cfg, inputs.to_vec(), targets.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_problem(
        rng: &mut impl Rng,
        n: usize,
    ) -> (Vec<[f64; 2]>, Vec<f64>) {
        let inputs: Vec<[f64; 2]> =
            (0..n).map(|_| [rng.gen_range(0.0..PI), rng.gen_range(0.0..2.0 * PI)]).collect();
        let targets: Vec<f64> = inputs
            .iter()
            .map(|psi| 1.0 + 0.3 * (2.0 * psi[0]).sin() * psi[1].cos() + 0.05 * rng.gen::<f64>())
            .collect();
        (inputs, targets)
    }

    /// Dense-solve oracle: same formulas via explicit matrix inversion,
    /// sharing only the kernel evaluations with the implementation.
    fn dense_oracle(
        cfg: &KernelConfig,
        inputs: &[[f64; 2]],
        targets: &[f64],
        jitter_fraction: f64,
        query: &[f64; 2],
    ) -> (f64, f64, f64) {
        let n = inputs.len();
        let mut ky = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                ky[(i, j)] = kernel_eval(cfg, &inputs[i], &inputs[j]);
            }
        }
        let mean_diag = ky.diagonal().sum() / n as f64;
        for i in 0..n {
            ky[(i, i)] += cfg.noise_variance() + jitter_fraction * mean_diag;
        }
        let lu = ky.clone().lu();
        let y = DVector::from_column_slice(targets);
        let alpha = lu.solve(&y).expect("oracle solve");

        let kx = DVector::from_iterator(n, inputs.iter().map(|p| kernel_eval(cfg, query, p)));
        let mean = kx.dot(&alpha);
        let var = kernel_eval(cfg, query, query) - kx.dot(&lu.solve(&kx).expect("oracle solve"));

        let nmll_val = 0.5 * y.dot(&alpha)
            + 0.5 * ky.determinant().ln()
            + 0.5 * n as f64 * (2.0 * PI).ln();
        (mean, var, nmll_val)
    }

    #[test]
    fn nmll_single_point_cases() {
        // n = 1, k(x,x) = 1, sigma^2 ~ 0 (jitter only).
        let cfg = KernelConfig::new(KernelKind::Rbf).with_noise_variance(1e-300);
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let v0 = nmll(&[[0.3, 0.4]], &[0.0], &cfg).unwrap();
        assert_abs_diff_eq!(v0, half_log_2pi, epsilon = 1e-6);
        let v1 = nmll(&[[0.3, 0.4]], &[1.0], &cfg).unwrap();
        assert_abs_diff_eq!(v1, 0.5 + half_log_2pi, epsilon = 1e-6);
    }

    #[test]
    fn nmll_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in KernelKind::ALL {
            let cfg = KernelConfig::new(kind)
                .with_lengthscale(0.8)
                .with_alpha(1.3)
                .with_noise_variance(1e-3);
            let (inputs, targets) = random_problem(&mut rng, 6);
            let value = nmll(&inputs, &targets, &cfg).unwrap();
            let (_, _, oracle) =
                dense_oracle(&cfg, &inputs, &targets, JITTER_BASE, &[0.1, 0.2]);
            assert!(
                (value - oracle).abs() <= 1e-10 * oracle.abs().max(1.0),
                "{kind:?}: {value} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn predict_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in KernelKind::ALL {
            for mode in [DistanceMode::AngleParams, DistanceMode::BearingEuclidean] {
                let cfg = KernelConfig::new(kind)
                    .with_lengthscale(0.9)
                    .with_alpha(0.8)
                    .with_noise_variance(1e-4)
                    .with_distance_mode(mode);
                let (inputs, targets) = random_problem(&mut rng, 8);
                let model = GpModel::from_parts(cfg, inputs.clone(), targets.clone()).unwrap();
                let query = [1.1, 2.2];
                let pred = model.predict(&query);

                // The oracle sees the scaled targets, like the implementation.
                let scaled: Vec<f64> =
                    targets.iter().map(|t| t / model.target_scale).collect();
                let (mean, var, _) = dense_oracle(&cfg, &inputs, &scaled, JITTER_BASE, &query);
                let mean = (mean * model.target_scale).max(0.0);
                let var = var.max(0.0) * model.target_scale * model.target_scale;
                // The posterior variance is a difference of two nearly equal
                // O(k(x,x)) terms, so its error is relative to that scale.
                let kxx = kernel_eval(&cfg, &query, &query)
                    * model.target_scale
                    * model.target_scale;
                assert!(
                    (pred.mean - mean).abs() <= 1e-8 * mean.abs().max(1.0),
                    "{kind:?}/{mode:?} mean {} vs oracle {mean}",
                    pred.mean
                );
                assert!(
                    (pred.variance - var).abs() <= 1e-8 * var.abs().max(kxx),
                    "{kind:?}/{mode:?} var {} vs oracle {var}",
                    pred.variance
                );
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for kind in KernelKind::ALL {
            for trial in 0..5 {
                let (inputs, targets) = random_problem(&mut rng, 10);
                let cfg = KernelConfig::new(kind)
                    .with_lengthscale(rng.gen_range(0.5..1.5))
                    .with_alpha(rng.gen_range(0.7..1.4))
                    .with_noise_variance(rng.gen_range(1e-4..1e-2))
                    .with_distance_mode(DistanceMode::BearingEuclidean);
                let features: Vec<[f64; 3]> =
                    inputs.iter().map(|p| cfg.feature(p)).collect();
                let y = DVector::from_column_slice(&targets);
                let (_, grads) = nmll_with_grad(&features, &y, &cfg).unwrap();

                let h = 1e-5;
                for (gi, &param) in cfg.active_params().iter().enumerate() {
                    let mut cfg_p = cfg;
                    cfg_p.set_param(param, cfg.get_param(param) + h);
                    let mut cfg_m = cfg;
                    cfg_m.set_param(param, cfg.get_param(param) - h);
                    let fp = nmll(&inputs, &targets, &cfg_p).unwrap();
                    let fm = nmll(&inputs, &targets, &cfg_m).unwrap();
                    let fd = (fp - fm) / (2.0 * h);
                    let rel = (grads[gi] - fd).abs() / grads[gi].abs().max(fd.abs()).max(1e-8);
                    assert!(
                        rel < 1e-4,
                        "{kind:?} trial {trial} param {param:?}: {} vs fd {fd}",
                        grads[gi]
                    );
                }
            }
        }
    }

    #[test]
    fn fit_interpolates_constant_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for kind in KernelKind::ALL {
            // The linear kernel spans only w . u(psi); a nonzero constant is
            // outside its function space and cannot be interpolated.
            if kind == KernelKind::Linear {
                continue;
            }
            let inputs: Vec<[f64; 2]> = (0..20)
                .map(|_| [rng.gen_range(0.1..PI - 0.1), rng.gen_range(0.0..2.0 * PI)])
                .collect();
            let targets = vec![5.0; 20];
            let model = fit(
                &inputs,
                &targets,
                kind,
                DistanceMode::BearingEuclidean,
                &OptimizerConfig::default(),
            )
            .unwrap();
            for psi in &inputs {
                let mean = model.predict_mean(psi);
                assert!(
                    (mean - 5.0).abs() < 1e-6,
                    "{kind:?}: prediction {mean} at training input"
                );
            }
        }
    }

    #[test]
    fn fit_does_not_worsen_nmll() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for kind in KernelKind::ALL {
            let (inputs, targets) = random_problem(&mut rng, 30);
            let init = heuristic_config(kind, DistanceMode::BearingEuclidean, &inputs, &targets);
            let model = fit(
                &inputs,
                &targets,
                kind,
                DistanceMode::BearingEuclidean,
                &OptimizerConfig { iterations: 60, ..Default::default() },
            )
            .unwrap();
            let scaled: Vec<f64> = targets.iter().map(|t| t / model.target_scale).collect();
            let at_init = nmll(&inputs, &scaled, &init).unwrap();
            assert!(
                model.final_nmll <= at_init + 1e-9,
                "{kind:?}: fitted {} vs init {at_init}",
                model.final_nmll
            );
        }
    }

    #[test]
    fn predict_exact_at_training_inputs_with_tiny_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (inputs, targets) = random_problem(&mut rng, 15);
        let cfg = KernelConfig::new(KernelKind::RationalQuadratic)
            .with_lengthscale(1.0)
            .with_noise_variance(1e-300); // jitter only
        let model = GpModel::from_parts(cfg, inputs.clone(), targets.clone()).unwrap();
        for (psi, d) in inputs.iter().zip(&targets) {
            let pred = model.predict(psi);
            assert!((pred.mean - d).abs() < 1e-6, "mean {} target {d}", pred.mean);
            assert!(pred.variance < 1e-6 * model.target_scale * model.target_scale);
        }
    }

    #[test]
    fn variance_reverts_to_prior_far_from_data() {
        // Cluster of training directions near the +z pole, query near -z.
        let inputs: Vec<[f64; 2]> = (0..10).map(|i| [0.05 + 0.01 * i as f64, 0.3]).collect();
        let targets: Vec<f64> = (0..10).map(|i| 1.0 + 0.01 * i as f64).collect();
        let cfg = KernelConfig::new(KernelKind::Rbf)
            .with_lengthscale(0.2)
            .with_noise_variance(1e-6);
        let model = GpModel::from_parts(cfg, inputs, targets).unwrap();
        let pred = model.predict(&[PI - 0.05, 0.3]);
        let prior = model.target_scale * model.target_scale; // k(x,x) = 1 scaled
        assert!((pred.variance - prior).abs() < 1e-3 * prior.max(1.0));
    }

    #[test]
    fn cholesky_reconstructs_noisy_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (inputs, targets) = random_problem(&mut rng, 12);
        let cfg = KernelConfig::new(KernelKind::Matern52)
            .with_lengthscale(0.5)
            .with_noise_variance(1e-3);
        let model = GpModel::from_parts(cfg, inputs.clone(), targets).unwrap();
        let l = model.chol_lower();
        let rebuilt = l * l.transpose();
        for i in 0..inputs.len() {
            for j in 0..inputs.len() {
                let mut expected = kernel_eval(&cfg, &inputs[i], &inputs[j]);
                if i == j {
                    expected += cfg.noise_variance() + model.jitter;
                }
                assert!(
                    (rebuilt[(i, j)] - expected).abs() <= 1e-8 * expected.abs().max(1.0),
                    "entry ({i},{j})"
                );
            }
        }
    }

    // PSD property for the stationary kernels under both distance modes.
    #[test]
    fn gram_matrices_are_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for kind in [
            KernelKind::RationalQuadratic,
            KernelKind::Rbf,
            KernelKind::Matern52,
            KernelKind::Periodic,
        ] {
            for mode in [DistanceMode::AngleParams, DistanceMode::BearingEuclidean] {
                for _ in 0..5 {
                    let n = rng.gen_range(5..50);
                    let cfg = KernelConfig::new(kind)
                        .with_lengthscale(rng.gen_range(0.3..2.0))
                        .with_alpha(rng.gen_range(0.5..2.0))
                        .with_distance_mode(mode);
                    let feats: Vec<[f64; 3]> = (0..n)
                        .map(|_| {
                            cfg.feature(&[
                                rng.gen_range(0.0..PI),
                                rng.gen_range(0.0..2.0 * PI),
                            ])
                        })
                        .collect();
                    let gram = gram_matrix(&cfg, &feats);
                    let min_eig = gram
                        .symmetric_eigenvalues()
                        .iter()
                        .cloned()
                        .fold(f64::INFINITY, f64::min);
                    assert!(min_eig >= -1e-8, "{kind:?}/{mode:?}: min eigenvalue {min_eig}");
                }
            }
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (inputs, targets) = random_problem(&mut rng, 25);
        let opt = OptimizerConfig { iterations: 40, ..Default::default() };
        let a = fit(&inputs, &targets, KernelKind::RationalQuadratic, DistanceMode::BearingEuclidean, &opt)
            .unwrap();
        let b = fit(&inputs, &targets, KernelKind::RationalQuadratic, DistanceMode::BearingEuclidean, &opt)
            .unwrap();
        assert_eq!(a.kernel, b.kernel);
        assert_eq!(a.final_nmll.to_bits(), b.final_nmll.to_bits());
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        assert!(matches!(
            nmll(&[], &[], &KernelConfig::new(KernelKind::Rbf)),
            Err(GpError::EmptyTrainingSet)
        ));
        assert!(matches!(
            nmll(&[[0.0, 0.0]], &[1.0, 2.0], &KernelConfig::new(KernelKind::Rbf)),
            Err(GpError::LengthMismatch { .. })
        ));
    }
}
