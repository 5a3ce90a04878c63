//! Spatial sensor-network model: GH skewed-t dynamics on a 2-D grid with
//! Poisson count measurements.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, Gamma, Poisson};

use super::gaussian::standard_normal;
use super::{GaussianNoise, StateSpaceModel};
use crate::error::{Error, Result};
use crate::linalg::{Jacobian, SpdFactor, SymMat};
use crate::special::{ln_factorial, ln_gamma, log_bessel_k};

/// Unit-spaced square grid of `d` sensor locations, row-major.
pub fn grid_locations(d: usize) -> Result<Vec<[f64; 2]>> {
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        return Err(Error::Parameter(format!("{d} sensors do not form a square grid")));
    }
    Ok((0..d).map(|i| [(i % side) as f64, (i / side) as f64]).collect())
}

/// `Σ_ij = α₀ exp(-‖L_i − L_j‖² / β) + α₁ δ_ij`.
pub fn build_dispersion_matrix(locations: &[[f64; 2]], alpha0: f64, alpha1: f64, beta: f64) -> Result<DMatrix<f64>> {
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::Parameter(format!("length scale beta must be positive, got {beta}")));
    }
    if alpha0 <= 0.0 || alpha1 < 0.0 {
        return Err(Error::Parameter("need alpha0 > 0 and alpha1 >= 0".into()));
    }
    let d = locations.len();
    Ok(DMatrix::from_fn(d, d, |i, j| {
        let dx = locations[i][0] - locations[j][0];
        let dy = locations[i][1] - locations[j][1];
        let v = alpha0 * (-(dx * dx + dy * dy) / beta).exp();
        if i == j {
            v + alpha1
        } else {
            v
        }
    }))
}

#[derive(Clone, Debug)]
pub struct GhSkewTParams {
    pub alpha: f64,
    pub gamma: DVector<f64>,
    pub nu: f64,
    pub sigma: DMatrix<f64>,
    pub locations: Vec<[f64; 2]>,
}

/// Multivariate GH skewed-t transition `p(x | x_prev)` with location `α x_prev`.
#[derive(Clone, Debug)]
pub struct GhSkewT {
    params: GhSkewTParams,
    factor: SpdFactor,
    /// Σ⁻¹γ
    skew_precision: DVector<f64>,
    /// γᵀΣ⁻¹γ
    skew_norm: f64,
    log_norm: f64,
    mixing: Gamma<f64>,
}

impl GhSkewT {
    pub fn new(params: GhSkewTParams) -> Result<Self> {
        let d = params.sigma.nrows();
        if params.gamma.len() != d {
            return Err(Error::Parameter("skewness dimension mismatch".into()));
        }
        if params.nu <= 0.0 {
            return Err(Error::Parameter("degrees of freedom must be positive".into()));
        }
        let factor = match nalgebra::Cholesky::new(params.sigma.clone()) {
            Some(c) => SpdFactor::Dense { l: c.unpack() },
            None => return Err(Error::Parameter("dispersion matrix is not positive definite".into())),
        };
        let skew_precision = factor.solve(&params.gamma);
        let skew_norm = params.gamma.dot(&skew_precision);
        let a = 0.5 * (params.nu + d as f64);
        let dd = d as f64;
        let base = -ln_gamma(0.5 * params.nu) - 0.5 * dd * (PI * params.nu).ln() - 0.5 * factor.log_det();
        let log_norm = if skew_norm > 0.0 {
            (1.0 - a) * 2f64.ln() + base
        } else {
            ln_gamma(a) + base
        };
        let mixing = Gamma::new(0.5 * params.nu, 2.0 / params.nu)
            .map_err(|e| Error::Parameter(format!("mixing law: {e}")))?;
        Ok(GhSkewT {
            params,
            factor,
            skew_precision,
            skew_norm,
            log_norm,
            mixing,
        })
    }

    pub fn params(&self) -> &GhSkewTParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.gamma.len()
    }

    fn order(&self) -> f64 {
        0.5 * (self.params.nu + self.dim() as f64)
    }

    pub fn log_density(&self, x: &DVector<f64>, x_prev: &DVector<f64>) -> f64 {
        let r = x - x_prev * self.params.alpha;
        let q = self.factor.mahalanobis_sq(&r);
        self.log_density_parts(&r, q)
    }

    fn log_density_parts(&self, r: &DVector<f64>, q: f64) -> f64 {
        let nu = self.params.nu;
        let a = self.order();
        let tail = -a * (q / nu).ln_1p();
        if self.skew_norm == 0.0 {
            return self.log_norm + tail;
        }
        let u = ((nu + q) * self.skew_norm).sqrt();
        if !(u > 0.0 && u.is_finite()) {
            return f64::NEG_INFINITY;
        }
        self.log_norm + r.dot(&self.skew_precision) + log_bessel_k(a, u) + a * u.ln() + tail
    }

    pub fn gradient(&self, x: &DVector<f64>, x_prev: &DVector<f64>) -> DVector<f64> {
        let r = x - x_prev * self.params.alpha;
        let pr = self.factor.solve(&r);
        let q = r.dot(&pr);
        let nu = self.params.nu;
        let a = self.order();
        let mut coef = 2.0 * a / (nu + q);
        if self.skew_norm > 0.0 {
            let u = ((nu + q) * self.skew_norm).sqrt();
            if !(u > 0.0 && u.is_finite()) {
                return DVector::from_element(x.len(), f64::NAN);
            }
            let ratio = (log_bessel_k(a - 1.0, u) - log_bessel_k(a, u)).exp();
            coef += self.skew_norm / u * ratio;
        }
        &self.skew_precision - pr * coef
    }

    /// Normal mean–variance mixture draw with inverse-gamma mixing.
    pub fn sample(&self, x_prev: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let w = 1.0 / self.mixing.sample(rng);
        let eps = standard_normal(self.dim(), rng);
        x_prev * self.params.alpha + &self.params.gamma * w + self.factor.color(&eps) * w.sqrt()
    }

    /// `E[x | x_prev]`; finite for ν > 2.
    pub fn mean(&self, x_prev: &DVector<f64>) -> DVector<f64> {
        let nu = self.params.nu;
        x_prev * self.params.alpha + &self.params.gamma * (nu / (nu - 2.0))
    }

    /// `Cov[x | x_prev]`; finite for ν > 4.
    pub fn covariance(&self) -> SymMat {
        let nu = self.params.nu;
        let mean_w = nu / (nu - 2.0);
        let var_w = 2.0 * nu * nu / ((nu - 2.0).powi(2) * (nu - 4.0));
        SymMat::Full(self.params.sigma.clone() * mean_w).add_rank_one(&self.params.gamma, var_w)
    }

    pub fn dispersion_factor(&self) -> &SpdFactor {
        &self.factor
    }
}

/// Poisson counts with rate `m₁ exp(m₂ x)` per sensor.
#[derive(Clone, Copy, Debug)]
pub struct PoissonCounts {
    pub m1: f64,
    pub m2: f64,
}

impl PoissonCounts {
    pub fn rate(&self, x: &DVector<f64>) -> DVector<f64> {
        x.map(|v| self.m1 * (self.m2 * v).exp())
    }

    fn log_likelihood_unchecked(&self, z: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let lm1 = self.m1.ln();
        z.iter()
            .zip(x.iter())
            .map(|(&c, &v)| c * (lm1 + self.m2 * v) - self.m1 * (self.m2 * v).exp() - ln_factorial(c))
            .sum()
    }
}

/// `Σ_s [z_s log(m₁e^{m₂x_s}) − m₁e^{m₂x_s} − log z_s!]`.
pub fn poisson_count_log_likelihood(z: &DVector<f64>, x: &DVector<f64>, m1: f64, m2: f64) -> Result<f64> {
    if let Some(bad) = z.iter().find(|c| **c < 0.0 || c.fract() != 0.0) {
        return Err(Error::Input(format!("count {bad} is not a non-negative integer")));
    }
    if z.len() != x.len() {
        return Err(Error::Input("count and state dimensions differ".into()));
    }
    Ok(PoissonCounts { m1, m2 }.log_likelihood_unchecked(z, x))
}

#[derive(Clone, Debug)]
pub struct SpatialSensorModel {
    skewt: GhSkewT,
    counts: PoissonCounts,
    prior_mean: DVector<f64>,
    prior: GaussianNoise,
    process_cov: SymMat,
    dispersion_precision: SymMat,
}

impl SpatialSensorModel {
    pub fn new(skewt: GhSkewTParams, counts: PoissonCounts, prior_mean: DVector<f64>, prior_cov: SymMat) -> Result<Self> {
        if skewt.nu <= 4.0 {
            return Err(Error::Parameter("the skewed-t transition needs nu > 4 for a finite covariance".into()));
        }
        let skewt = GhSkewT::new(skewt)?;
        if prior_mean.len() != skewt.dim() || prior_cov.dim() != skewt.dim() {
            return Err(Error::Parameter("prior dimension mismatch".into()));
        }
        let process_cov = skewt.covariance();
        let dispersion_precision = SymMat::Full(skewt.dispersion_factor().inverse_dense());
        Ok(SpatialSensorModel {
            skewt,
            counts,
            prior_mean,
            prior: GaussianNoise::new(prior_cov),
            process_cov,
            dispersion_precision,
        })
    }

    /// Grid model with the benchmark's dispersion parameters.
    pub fn on_grid(d: usize, alpha: f64, nu: f64, gamma: f64, alpha0: f64, alpha1: f64, beta: f64, counts: PoissonCounts) -> Result<Self> {
        let locations = grid_locations(d)?;
        let sigma = build_dispersion_matrix(&locations, alpha0, alpha1, beta)?;
        let params = GhSkewTParams {
            alpha,
            gamma: DVector::from_element(d, gamma),
            nu,
            sigma,
            locations,
        };
        Self::new(params, counts, DVector::zeros(d), SymMat::zeros(d))
    }

    pub fn skewt(&self) -> &GhSkewT {
        &self.skewt
    }

    pub fn counts(&self) -> PoissonCounts {
        self.counts
    }
}

impl StateSpaceModel for SpatialSensorModel {
    fn dim_state(&self) -> usize {
        self.skewt.dim()
    }

    fn dim_obs(&self) -> usize {
        self.skewt.dim()
    }

    fn predict_mean(&self, _k: usize, x_prev: &DVector<f64>) -> DVector<f64> {
        self.skewt.mean(x_prev)
    }

    fn transition_jacobian(&self, _k: usize, _x_prev: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim_state();
        DMatrix::identity(d, d) * self.skewt.params.alpha
    }

    fn transition_log_density(&self, _k: usize, x: &DVector<f64>, x_prev: &DVector<f64>) -> f64 {
        self.skewt.log_density(x, x_prev)
    }

    fn transition_log_density_gradient(&self, _k: usize, x: &DVector<f64>, x_prev: &DVector<f64>) -> DVector<f64> {
        self.skewt.gradient(x, x_prev)
    }

    fn sample_transition(&self, _k: usize, x_prev: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        self.skewt.sample(x_prev, rng)
    }

    fn transition_covariance(&self) -> SymMat {
        self.process_cov.clone()
    }

    fn prior_precision(&self) -> SymMat {
        self.dispersion_precision.clone()
    }

    fn measurement_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        self.counts.rate(x)
    }

    fn measurement_jacobian(&self, x: &DVector<f64>) -> Jacobian {
        Jacobian::Diag(self.counts.rate(x) * self.counts.m2)
    }

    fn measurement_covariance(&self, x: &DVector<f64>) -> SymMat {
        SymMat::Diag(self.counts.rate(x))
    }

    fn log_likelihood(&self, z: &DVector<f64>, x: &DVector<f64>) -> f64 {
        self.counts.log_likelihood_unchecked(z, x)
    }

    fn log_likelihood_gradient(&self, z: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        (z - self.counts.rate(x)) * self.counts.m2
    }

    fn sample_measurement(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let rate = self.counts.rate(x);
        DVector::from_fn(rate.len(), |i, _| {
            let lam = rate[i];
            if lam <= 0.0 {
                0.0
            } else {
                Poisson::new(lam).map(|p| p.sample(rng)).unwrap_or(0.0)
            }
        })
    }

    fn likelihood_fisher(&self, x: &DVector<f64>) -> SymMat {
        let m2 = self.counts.m2;
        SymMat::Diag(self.counts.rate(x) * (m2 * m2))
    }

    fn likelihood_fisher_derivative(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(self.counts.rate(x) * self.counts.m2.powi(3))
    }

    fn initial_mean(&self) -> DVector<f64> {
        self.prior_mean.clone()
    }

    fn initial_covariance(&self) -> SymMat {
        self.prior.cov().clone()
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        &self.prior_mean + self.prior.sample(rng)
    }
}
