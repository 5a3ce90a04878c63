//! Nonlinear model with Gaussian-mixture process and measurement noise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use super::{GaussianNoise, StateSpaceModel};
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, Jacobian, SymMat};

/// Mixture weights, mean offsets and covariances of one noise source.
#[derive(Clone, Debug)]
pub struct GmmNoiseSpec {
    pub weights: Vec<f64>,
    pub offsets: Vec<DVector<f64>>,
    pub covs: Vec<SymMat>,
}

impl GmmNoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let m = self.weights.len();
        if m == 0 || self.offsets.len() != m || self.covs.len() != m {
            return Err(Error::Parameter("mixture needs matching weights, offsets and covariances".into()));
        }
        if self.weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Parameter("mixture weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!("mixture weights sum to {total}, not 1")));
        }
        let d = self.offsets[0].len();
        for (o, c) in self.offsets.iter().zip(&self.covs) {
            if o.len() != d || c.dim() != d {
                return Err(Error::Parameter("mixture component dimension mismatch".into()));
            }
            if !c.is_symmetric(1e-12) || c.factor().is_err() {
                return Err(Error::Parameter("mixture covariance is not SPD".into()));
            }
        }
        Ok(())
    }

    /// Equal-weight components `N(μ_m 1, σ² I)`.
    pub fn isotropic(d: usize, means: &[f64], sd: f64) -> Self {
        let m = means.len();
        GmmNoiseSpec {
            weights: vec![1.0 / m as f64; m],
            offsets: means.iter().map(|mu| DVector::from_element(d, *mu)).collect(),
            covs: vec![SymMat::scaled_identity(d, sd * sd); m],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.offsets[0].len());
        for (w, o) in self.weights.iter().zip(&self.offsets) {
            mean += o * *w;
        }
        mean
    }

    /// Moment-matched covariance `Σ_m w_m (C_m + (μ_m − μ̄)(μ_m − μ̄)ᵀ)`.
    pub fn covariance(&self) -> SymMat {
        let mean = self.mean();
        let mut cov = SymMat::zeros(mean.len());
        for ((w, o), c) in self.weights.iter().zip(&self.offsets).zip(&self.covs) {
            cov = cov.add(&c.scale(*w));
            let dev = o - &mean;
            if dev.iter().any(|x| *x != 0.0) {
                cov = cov.add_rank_one(&dev, *w);
            }
        }
        cov
    }
}

/// Deterministic part `f_k` of the dynamics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DynamicMap {
    Linear { alpha: f64 },
    /// `0.5 x_c + 8 cos(1.2(k−1)) + 2.5 x_{c±1} / (1 + x_{c−1}²)` with the
    /// three-branch neighbour coupling of the benchmark.
    CoupledOscillator,
}

/// Deterministic part `h` of the measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MeasurementMap {
    Identity,
    /// `x_c² / 20`
    QuadraticOver20,
}

#[derive(Clone, Debug)]
pub struct GmmModel {
    d: usize,
    dynamic: DynamicMap,
    measurement: MeasurementMap,
    process: GmmNoiseSpec,
    noise: GmmNoiseSpec,
    process_noise: Vec<GaussianNoise>,
    measurement_noise: Vec<GaussianNoise>,
    process_mean: DVector<f64>,
    noise_mean: DVector<f64>,
    process_cov: SymMat,
    noise_cov: SymMat,
    noise_cov_inv: SymMat,
    process_precision: SymMat,
    component_precisions: Vec<SymMat>,
    prior_mean: DVector<f64>,
    prior: GaussianNoise,
}

impl GmmModel {
    pub fn new(
        dynamic: DynamicMap,
        measurement: MeasurementMap,
        process: GmmNoiseSpec,
        noise: GmmNoiseSpec,
        prior_mean: DVector<f64>,
        prior_cov: SymMat,
    ) -> Result<Self> {
        process.validate()?;
        noise.validate()?;
        let d = process.offsets[0].len();
        if noise.offsets[0].len() != d || prior_mean.len() != d || prior_cov.dim() != d {
            return Err(Error::Parameter("state and observation dimensions must agree".into()));
        }
        if dynamic == DynamicMap::CoupledOscillator && d < 2 {
            return Err(Error::Parameter("the coupled dynamic map needs d >= 2".into()));
        }
        let process_cov = process.covariance();
        let noise_cov = noise.covariance();
        Ok(GmmModel {
            d,
            dynamic,
            measurement,
            process_noise: process.covs.iter().cloned().map(GaussianNoise::new).collect(),
            measurement_noise: noise.covs.iter().cloned().map(GaussianNoise::new).collect(),
            process_mean: process.mean(),
            noise_mean: noise.mean(),
            process_precision: process_cov.inverse()?,
            noise_cov_inv: noise_cov.inverse()?,
            component_precisions: process.covs.iter().map(|c| c.inverse()).collect::<Result<_>>()?,
            process_cov,
            noise_cov,
            process,
            noise,
            prior_mean,
            prior: GaussianNoise::new(prior_cov),
        })
    }

    /// Benchmark model: coupled dynamics, quadratic measurement, isotropic
    /// three-component mixtures, `p(x₀) = N(0, I)`.
    pub fn benchmark(d: usize, process_means: &[f64], sigma_v: f64, noise_means: &[f64], sigma_w: f64) -> Result<Self> {
        GmmModel::new(
            DynamicMap::CoupledOscillator,
            MeasurementMap::QuadraticOver20,
            GmmNoiseSpec::isotropic(d, process_means, sigma_v),
            GmmNoiseSpec::isotropic(d, noise_means, sigma_w),
            DVector::zeros(d),
            SymMat::identity(d),
        )
    }

    pub fn process_spec(&self) -> &GmmNoiseSpec {
        &self.process
    }

    pub fn noise_spec(&self) -> &GmmNoiseSpec {
        &self.noise
    }

    pub fn n_process_components(&self) -> usize {
        self.process.len()
    }

    pub fn n_noise_components(&self) -> usize {
        self.noise.len()
    }

    pub fn log_process_weight(&self, m: usize) -> f64 {
        self.process.weights[m].ln()
    }

    pub fn log_noise_weight(&self, n: usize) -> f64 {
        self.noise.weights[n].ln()
    }

    /// `f_k(x_{k-1})` without noise.
    pub fn base_mean(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        match self.dynamic {
            DynamicMap::Linear { alpha } => x * alpha,
            DynamicMap::CoupledOscillator => {
                let d = self.d;
                let drive = 8.0 * (1.2 * (k as f64 - 1.0)).cos();
                DVector::from_fn(d, |c, _| {
                    let (num, den) = coupling_indices(c, d);
                    0.5 * x[c] + drive + 2.5 * x[num] / (1.0 + x[den] * x[den])
                })
            }
        }
    }

    fn base_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let d = self.d;
        match self.dynamic {
            DynamicMap::Linear { alpha } => DMatrix::identity(d, d) * alpha,
            DynamicMap::CoupledOscillator => {
                let mut j = DMatrix::zeros(d, d);
                for c in 0..d {
                    let (num, den) = coupling_indices(c, d);
                    let q = 1.0 + x[den] * x[den];
                    j[(c, c)] += 0.5;
                    j[(c, num)] += 2.5 / q;
                    j[(c, den)] += -2.5 * x[num] * 2.0 * x[den] / (q * q);
                }
                j
            }
        }
    }

    /// `h(x)` without noise.
    pub fn base_measurement(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.measurement {
            MeasurementMap::Identity => x.clone(),
            MeasurementMap::QuadraticOver20 => x.map(|v| v * v / 20.0),
        }
    }

    pub fn base_measurement_jacobian(&self, x: &DVector<f64>) -> Jacobian {
        match self.measurement {
            MeasurementMap::Identity => Jacobian::Diag(DVector::from_element(self.d, 1.0)),
            MeasurementMap::QuadraticOver20 => Jacobian::Diag(x / 10.0),
        }
    }

    /// Transition mean under process component `m`: `f_k(x_{k-1}) + ψ_m`.
    pub fn component_transition_mean(&self, k: usize, x_prev: &DVector<f64>, m: usize) -> DVector<f64> {
        self.base_mean(k, x_prev) + &self.process.offsets[m]
    }

    pub fn component_transition_cov(&self, m: usize) -> &SymMat {
        &self.process.covs[m]
    }

    pub fn component_prior_precision(&self, m: usize) -> &SymMat {
        &self.component_precisions[m]
    }

    pub fn component_transition_log_density(&self, k: usize, x: &DVector<f64>, x_prev: &DVector<f64>, m: usize) -> f64 {
        self.process_noise[m].log_density(&(x - self.component_transition_mean(k, x_prev, m)))
    }

    /// Same as above with the mean already computed.
    pub fn component_transition_log_density_at(&self, x: &DVector<f64>, mean: &DVector<f64>, m: usize) -> f64 {
        self.process_noise[m].log_density(&(x - mean))
    }

    pub fn component_transition_gradient(&self, k: usize, x: &DVector<f64>, x_prev: &DVector<f64>, m: usize) -> DVector<f64> {
        -self.process_noise[m].precision_times(&(x - self.component_transition_mean(k, x_prev, m)))
    }

    pub fn sample_component_transition(&self, k: usize, x_prev: &DVector<f64>, m: usize, rng: &mut dyn RngCore) -> DVector<f64> {
        self.component_transition_mean(k, x_prev, m) + self.process_noise[m].sample(rng)
    }

    /// Measurement mean under noise component `n`: `h(x) + ζ_n`.
    pub fn component_measurement_mean(&self, x: &DVector<f64>, n: usize) -> DVector<f64> {
        self.base_measurement(x) + &self.noise.offsets[n]
    }

    pub fn component_measurement_cov(&self, n: usize) -> &SymMat {
        &self.noise.covs[n]
    }

    pub fn component_log_likelihood(&self, z: &DVector<f64>, x: &DVector<f64>, n: usize) -> f64 {
        self.measurement_noise[n].log_density(&(z - self.component_measurement_mean(x, n)))
    }

    pub fn component_likelihood_gradient(&self, z: &DVector<f64>, x: &DVector<f64>, n: usize) -> DVector<f64> {
        let r = z - self.component_measurement_mean(x, n);
        self.base_measurement_jacobian(x)
            .tr_mul_vec(&self.measurement_noise[n].precision_times(&r))
    }

    pub fn component_fisher(&self, x: &DVector<f64>, n: usize) -> SymMat {
        let prec = self.noise.covs[n].inverse().expect("validated SPD covariance");
        self.base_measurement_jacobian(x).congruence(&prec)
    }

    /// `∂F_ii/∂x_i` of the component Fisher; `None` when it is constant.
    pub fn component_fisher_derivative(&self, x: &DVector<f64>, n: usize) -> Option<DVector<f64>> {
        match (self.measurement, &self.noise.covs[n]) {
            (MeasurementMap::Identity, _) => None,
            (MeasurementMap::QuadraticOver20, SymMat::Diag(r)) => {
                Some(DVector::from_fn(self.d, |i, _| 2.0 * (x[i] / 10.0) * 0.1 / r[i]))
            }
            (MeasurementMap::QuadraticOver20, SymMat::Full(_)) => None,
        }
    }

    fn mixture_responsibilities(terms: &[f64]) -> Vec<f64> {
        let lse = log_sum_exp(terms);
        terms.iter().map(|t| (t - lse).exp()).collect()
    }
}

fn coupling_indices(c: usize, d: usize) -> (usize, usize) {
    if c == 0 {
        (1, 0)
    } else if c + 1 < d {
        (c + 1, c - 1)
    } else {
        (c, c - 1)
    }
}

/// Draws an index from normalized log-probabilities. A single category is
/// returned without touching the generator.
pub fn sample_categorical(log_probs: &[f64], rng: &mut dyn RngCore) -> usize {
    if log_probs.len() == 1 {
        return 0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs
        .iter()
        .rposition(|lp| lp.is_finite())
        .unwrap_or(log_probs.len() - 1)
}

impl StateSpaceModel for GmmModel {
    fn dim_state(&self) -> usize {
        self.d
    }

    fn dim_obs(&self) -> usize {
        self.d
    }

    fn predict_mean(&self, k: usize, x_prev: &DVector<f64>) -> DVector<f64> {
        self.base_mean(k, x_prev) + &self.process_mean
    }

    fn transition_jacobian(&self, _k: usize, x_prev: &DVector<f64>) -> DMatrix<f64> {
        self.base_jacobian(x_prev)
    }

    fn transition_log_density(&self, k: usize, x: &DVector<f64>, x_prev: &DVector<f64>) -> f64 {
        let base = self.base_mean(k, x_prev);
        let terms: Vec<f64> = (0..self.process.len())
            .map(|m| self.log_process_weight(m) + self.process_noise[m].log_density(&(x - &base - &self.process.offsets[m])))
            .collect();
        log_sum_exp(&terms)
    }

    fn transition_log_density_gradient(&self, k: usize, x: &DVector<f64>, x_prev: &DVector<f64>) -> DVector<f64> {
        let base = self.base_mean(k, x_prev);
        let residuals: Vec<DVector<f64>> = (0..self.process.len())
            .map(|m| x - &base - &self.process.offsets[m])
            .collect();
        let terms: Vec<f64> = residuals
            .iter()
            .enumerate()
            .map(|(m, r)| self.log_process_weight(m) + self.process_noise[m].log_density(r))
            .collect();
        let resp = Self::mixture_responsibilities(&terms);
        let mut g = DVector::zeros(self.d);
        for (m, r) in residuals.iter().enumerate() {
            g -= self.process_noise[m].precision_times(r) * resp[m];
        }
        g
    }

    fn sample_transition(&self, k: usize, x_prev: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let log_w: Vec<f64> = (0..self.process.len()).map(|m| self.log_process_weight(m)).collect();
        let m = sample_categorical(&log_w, rng);
        self.sample_component_transition(k, x_prev, m, rng)
    }

    fn transition_covariance(&self) -> SymMat {
        self.process_cov.clone()
    }

    fn prior_precision(&self) -> SymMat {
        self.process_precision.clone()
    }

    fn measurement_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        self.base_measurement(x) + &self.noise_mean
    }

    fn measurement_jacobian(&self, x: &DVector<f64>) -> Jacobian {
        self.base_measurement_jacobian(x)
    }

    fn measurement_covariance(&self, _x: &DVector<f64>) -> SymMat {
        self.noise_cov.clone()
    }

    fn measurement_is_linear(&self) -> bool {
        self.measurement == MeasurementMap::Identity
    }

    fn log_likelihood(&self, z: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let h = self.base_measurement(x);
        let terms: Vec<f64> = (0..self.noise.len())
            .map(|n| self.log_noise_weight(n) + self.measurement_noise[n].log_density(&(z - &h - &self.noise.offsets[n])))
            .collect();
        log_sum_exp(&terms)
    }

    fn log_likelihood_gradient(&self, z: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let h = self.base_measurement(x);
        let residuals: Vec<DVector<f64>> = (0..self.noise.len()).map(|n| z - &h - &self.noise.offsets[n]).collect();
        let terms: Vec<f64> = residuals
            .iter()
            .enumerate()
            .map(|(n, r)| self.log_noise_weight(n) + self.measurement_noise[n].log_density(r))
            .collect();
        let resp = Self::mixture_responsibilities(&terms);
        let mut inner = DVector::zeros(self.d);
        for (n, r) in residuals.iter().enumerate() {
            inner += self.measurement_noise[n].precision_times(r) * resp[n];
        }
        self.base_measurement_jacobian(x).tr_mul_vec(&inner)
    }

    fn sample_measurement(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let log_w: Vec<f64> = (0..self.noise.len()).map(|n| self.log_noise_weight(n)).collect();
        let n = sample_categorical(&log_w, rng);
        self.component_measurement_mean(x, n) + self.measurement_noise[n].sample(rng)
    }

    /// Surrogate Fisher from the moment-matched measurement covariance.
    fn likelihood_fisher(&self, x: &DVector<f64>) -> SymMat {
        self.base_measurement_jacobian(x).congruence(&self.noise_cov_inv)
    }

    fn likelihood_fisher_derivative(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        match (self.measurement, &self.noise_cov_inv) {
            (MeasurementMap::QuadraticOver20, SymMat::Diag(p)) => {
                Some(DVector::from_fn(self.d, |i, _| 2.0 * (x[i] / 10.0) * 0.1 * p[i]))
            }
            _ => None,
        }
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
