//! Covariance kernels over direction inputs.
//!
//! Inputs are direction parameter vectors `psi = (phi, theta)`. Stationary
//! kernels act on a distance chosen by [`DistanceMode`]: either the Euclidean
//! distance between the raw `(phi, theta)` pairs, or the Euclidean distance
//! between the corresponding unit bearing vectors. The bearing mode is the
//! default; it has no seam at `theta = 0` and keeps the Gram matrices PSD.
//!
//! All kernels have unit signal variance; targets are scaled outside the
//! kernel so the closed forms stay as written.

use crate::geometry::bearing_vector;
use serde::{Deserialize, Serialize};

/// Kernel family. The polynomial degree is fixed at 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// Rational quadratic `(1 + d^2/(2 alpha l^2))^(-alpha)`.
    RationalQuadratic,
    /// Squared exponential `exp(-d^2 / (2 l^2))`.
    Rbf,
    /// Matern with smoothness 5/2.
    Matern52,
    /// Product of per-coordinate exp-sine-squared factors with period 2*pi.
    Periodic,
    /// Scaled dot product `x . y / l^2`.
    Linear,
    /// `(x . y / l^2 + 1)^3`.
    Polynomial3,
}

impl KernelKind {
    pub const ALL: [KernelKind; 6] = [
        KernelKind::RationalQuadratic,
        KernelKind::Rbf,
        KernelKind::Matern52,
        KernelKind::Periodic,
        KernelKind::Linear,
        KernelKind::Polynomial3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::RationalQuadratic => "rq",
            KernelKind::Rbf => "rbf",
            KernelKind::Matern52 => "matern",
            KernelKind::Periodic => "periodic",
            KernelKind::Linear => "linear",
            KernelKind::Polynomial3 => "polynomial",
        }
    }

    pub fn parse(name: &str) -> Option<KernelKind> {
        match name {
            "rq" | "rational_quadratic" => Some(KernelKind::RationalQuadratic),
            "rbf" => Some(KernelKind::Rbf),
            "matern" | "matern52" => Some(KernelKind::Matern52),
            "periodic" => Some(KernelKind::Periodic),
            "linear" => Some(KernelKind::Linear),
            "polynomial" | "poly" | "polynomial3" => Some(KernelKind::Polynomial3),
            _ => None,
        }
    }

    /// Whether `k(x, x) = 1` independent of `x`.
    pub fn is_stationary(self) -> bool {
        !matches!(self, KernelKind::Linear | KernelKind::Polynomial3)
    }
}

/// How two direction parameter vectors are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Euclidean distance between raw `(phi, theta)` vectors.
    AngleParams,
    /// Euclidean distance between unit bearing vectors (default).
    BearingEuclidean,
}

/// Kernel family plus log-scale hyperparameters.
///
/// `log_alpha` is only read by the rational quadratic kernel. `log_noise` is
/// the log of the observation noise variance added to the Gram diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub log_lengthscale: f64,
    pub log_alpha: f64,
    pub log_noise: f64,
    pub distance_mode: DistanceMode,
}

impl KernelConfig {
    pub fn new(kind: KernelKind) -> Self {
        KernelConfig {
            kind,
            log_lengthscale: 0.0,
            log_alpha: 0.0,
            log_noise: (1e-4f64).ln(),
            distance_mode: DistanceMode::BearingEuclidean,
        }
    }

    pub fn with_lengthscale(mut self, l: f64) -> Self {
        self.log_lengthscale = l.ln();
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.log_alpha = alpha.ln();
        self
    }

    pub fn with_noise_variance(mut self, sigma2: f64) -> Self {
        self.log_noise = sigma2.ln();
        self
    }

    pub fn with_distance_mode(mut self, mode: DistanceMode) -> Self {
        self.distance_mode = mode;
        self
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise.exp()
    }

    /// Hyperparameters optimized for this kernel kind, in order.
    pub fn active_params(&self) -> &'static [ParamId] {
        match self.kind {
            KernelKind::RationalQuadratic => {
                &[ParamId::LogLengthscale, ParamId::LogAlpha, ParamId::LogNoise]
            }
            _ => &[ParamId::LogLengthscale, ParamId::LogNoise],
        }
    }

    pub fn get_param(&self, id: ParamId) -> f64 {
        match id {
            ParamId::LogLengthscale => self.log_lengthscale,
            ParamId::LogAlpha => self.log_alpha,
            ParamId::LogNoise => self.log_noise,
        }
    }

    pub fn set_param(&mut self, id: ParamId, value: f64) {
        match id {
            ParamId::LogLengthscale => self.log_lengthscale = value,
            ParamId::LogAlpha => self.log_alpha = value,
            ParamId::LogNoise => self.log_noise = value,
        }
    }

    /// Map a direction parameter vector to the feature this config compares.
    ///
    /// Angle mode pads with a zero third coordinate, which is neutral for
    /// every kernel form below.
    pub fn feature(&self, psi: &[f64; 2]) -> [f64; 3] {
        match self.distance_mode {
            DistanceMode::AngleParams => [psi[0], psi[1], 0.0],
            DistanceMode::BearingEuclidean => {
                let u = bearing_vector(psi[0], psi[1]);
                [u.x, u.y, u.z]
            }
        }
    }

    /// Pair statistic consumed by the closed forms: squared distance for
    /// rbf/rq/matern, summed squared half-angle sines for periodic, and the
    /// dot product for linear/polynomial.
    pub fn pair_stat(&self, a: &[f64; 3], b: &[f64; 3]) -> f64 {
        match self.kind {
            KernelKind::Periodic => (0..3)
                .map(|j| {
                    let s = ((a[j] - b[j]) / 2.0).sin();
                    s * s
                })
                .sum(),
            KernelKind::Linear | KernelKind::Polynomial3 => {
                a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
            }
            _ => {
                let dx = a[0] - b[0];
                let dy = a[1] - b[1];
                let dz = a[2] - b[2];
                dx * dx + dy * dy + dz * dz
            }
        }
    }

    /// Kernel value from a pair statistic.
    pub fn k_from_stat(&self, stat: f64) -> f64 {
        let l2 = (2.0 * self.log_lengthscale).exp();
        match self.kind {
            KernelKind::Rbf => (-stat / (2.0 * l2)).exp(),
            KernelKind::RationalQuadratic => {
                let alpha = self.alpha();
                let z = stat / (2.0 * alpha * l2);
                (-alpha * z.ln_1p()).exp()
            }
            KernelKind::Matern52 => {
                let s = (5.0 * stat).sqrt() / self.lengthscale();
                (1.0 + s + s * s / 3.0) * (-s).exp()
            }
            KernelKind::Periodic => (-2.0 * stat / l2).exp(),
            KernelKind::Linear => stat / l2,
            KernelKind::Polynomial3 => {
                let g = stat / l2 + 1.0;
                g * g * g
            }
        }
    }

    /// Derivative of the kernel value with respect to `log_lengthscale`.
    pub fn dk_dlog_lengthscale(&self, stat: f64) -> f64 {
        let l2 = (2.0 * self.log_lengthscale).exp();
        match self.kind {
            KernelKind::Rbf => self.k_from_stat(stat) * stat / l2,
            KernelKind::RationalQuadratic => {
                let alpha = self.alpha();
                let z = stat / (2.0 * alpha * l2);
                (stat / l2) * (-(alpha + 1.0) * z.ln_1p()).exp()
            }
            KernelKind::Matern52 => {
                let s = (5.0 * stat).sqrt() / self.lengthscale();
                (s * s / 3.0) * (1.0 + s) * (-s).exp()
            }
            KernelKind::Periodic => self.k_from_stat(stat) * 4.0 * stat / l2,
            KernelKind::Linear => -2.0 * stat / l2,
            KernelKind::Polynomial3 => {
                let g = stat / l2;
                -6.0 * g * (g + 1.0) * (g + 1.0)
            }
        }
    }

    /// Derivative with respect to `log_alpha`; zero for all kinds but rq.
    pub fn dk_dlog_alpha(&self, stat: f64) -> f64 {
        match self.kind {
            KernelKind::RationalQuadratic => {
                let alpha = self.alpha();
                let l2 = (2.0 * self.log_lengthscale).exp();
                let z = stat / (2.0 * alpha * l2);
                self.k_from_stat(stat) * alpha * (z / (1.0 + z) - z.ln_1p())
            }
            _ => 0.0,
        }
    }
}

/// One optimizable hyperparameter slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    LogLengthscale,
    LogAlpha,
    LogNoise,
}

/// Evaluate the kernel on two direction parameter vectors.
pub fn kernel_eval(cfg: &KernelConfig, psi_i: &[f64; 2], psi_j: &[f64; 2]) -> f64 {
    let a = cfg.feature(psi_i);
    let b = cfg.feature(psi_j);
    cfg.k_from_stat(cfg.pair_stat(&a, &b))
}
