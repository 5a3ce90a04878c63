use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use super::{GaussianNoise, LinearGaussianView, StateSpaceModel};
use crate::error::{Error, Result};
use crate::linalg::{Jacobian, SymMat};

/// `x_k = α x_{k-1} + v_k`, `v_k ~ N(0, Σ)`; `z_k = x_k + w_k`, `w_k ~ N(0, σ_z² I)`.
#[derive(Clone, Debug)]
pub struct LinearGaussianModel {
    alpha: f64,
    process: GaussianNoise,
    measurement: GaussianNoise,
    prior_mean: DVector<f64>,
    prior: GaussianNoise,
    process_precision: Option<SymMat>,
}

/// Builds the linear-Gaussian benchmark model with a known start `x_0 = 0`.
pub fn build_linear_gaussian_model(d: usize, alpha: f64, sigma: SymMat, sigma_z: f64) -> Result<LinearGaussianModel> {
    LinearGaussianModel::new(alpha, sigma, sigma_z * sigma_z, DVector::zeros(d), SymMat::zeros(d))
}

impl LinearGaussianModel {
    pub fn new(
        alpha: f64,
        process_cov: SymMat,
        measurement_var: f64,
        prior_mean: DVector<f64>,
        prior_cov: SymMat,
    ) -> Result<Self> {
        let d = process_cov.dim();
        if d == 0 {
            return Err(Error::Parameter("state dimension must be positive".into()));
        }
        if prior_mean.len() != d || prior_cov.dim() != d {
            return Err(Error::Parameter("prior dimension mismatch".into()));
        }
        if !process_cov.is_symmetric(1e-12) {
            return Err(Error::Parameter("process covariance is not symmetric".into()));
        }
        if measurement_var < 0.0 {
            return Err(Error::Parameter("measurement variance must be non-negative".into()));
        }
        let process = GaussianNoise::new(process_cov);
        let process_precision = process.factor().map(|f| match process.cov() {
            SymMat::Diag(v) => SymMat::Diag(v.map(|x| 1.0 / x)),
            SymMat::Full(_) => SymMat::Full(f.inverse_dense()),
        });
        Ok(LinearGaussianModel {
            alpha,
            process,
            measurement: GaussianNoise::new(SymMat::scaled_identity(d, measurement_var)),
            prior_mean,
            prior: GaussianNoise::new(prior_cov),
            process_precision,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn measurement_variance(&self) -> f64 {
        self.measurement.cov().diagonal()[0]
    }

    /// `sup_x p(z|x)`, reached at `x = z`.
    pub fn likelihood_supremum_log(&self) -> f64 {
        self.measurement.log_density(&DVector::zeros(self.dim_obs()))
    }
}

impl StateSpaceModel for LinearGaussianModel {
    fn dim_state(&self) -> usize {
        self.process.dim()
    }

    fn dim_obs(&self) -> usize {
        self.process.dim()
    }

    fn predict_mean(&self, _k: usize, x_prev: &DVector<f64>) -> DVector<f64> {
        x_prev * self.alpha
    }

    fn transition_jacobian(&self, _k: usize, _x_prev: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim_state();
        DMatrix::identity(d, d) * self.alpha
    }

    fn transition_log_density(&self, _k: usize, x: &DVector<f64>, x_prev: &DVector<f64>) -> f64 {
        self.process.log_density(&(x - x_prev * self.alpha))
    }

    fn transition_log_density_gradient(&self, _k: usize, x: &DVector<f64>, x_prev: &DVector<f64>) -> DVector<f64> {
        -self.process.precision_times(&(x - x_prev * self.alpha))
    }

    fn sample_transition(&self, _k: usize, x_prev: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        x_prev * self.alpha + self.process.sample(rng)
    }

    fn transition_covariance(&self) -> SymMat {
        self.process.cov().clone()
    }

    fn prior_precision(&self) -> SymMat {
        self.process_precision
            .clone()
            .unwrap_or_else(|| SymMat::zeros(self.dim_state()))
    }

    fn measurement_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn measurement_jacobian(&self, x: &DVector<f64>) -> Jacobian {
        Jacobian::Diag(DVector::from_element(x.len(), 1.0))
    }

    fn measurement_covariance(&self, _x: &DVector<f64>) -> SymMat {
        self.measurement.cov().clone()
    }

    fn measurement_is_linear(&self) -> bool {
        true
    }

    fn log_likelihood(&self, z: &DVector<f64>, x: &DVector<f64>) -> f64 {
        self.measurement.log_density(&(z - x))
    }

    fn log_likelihood_gradient(&self, z: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        self.measurement.precision_times(&(z - x))
    }

    fn sample_measurement(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        x + self.measurement.sample(rng)
    }

    fn likelihood_fisher(&self, _x: &DVector<f64>) -> SymMat {
        self.measurement.cov().inverse().unwrap_or_else(|_| SymMat::zeros(self.dim_state()))
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

    fn linear_gaussian(&self) -> Option<LinearGaussianView> {
        let d = self.dim_state();
        Some(LinearGaussianView {
            transition: DMatrix::identity(d, d) * self.alpha,
            process_cov: self.process.cov().clone(),
            observation: DMatrix::identity(d, d),
            measurement_cov: self.measurement.cov().clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_value_at_predicted_mean() {
        let m = LinearGaussianModel::new(0.9, SymMat::scaled_identity(2, 0.5), 0.25, DVector::zeros(2), SymMat::zeros(2)).unwrap();
        let xp = DVector::from_vec(vec![1.0, -2.0]);
        let x = &xp * 0.9;
        let expected = -(2.0 * std::f64::consts::PI * 0.5).ln();
        assert!((m.transition_log_density(1, &x, &xp) - expected).abs() < 1e-14);
    }

    #[test]
    fn degenerate_noise_samples_are_deterministic() {
        use rand::SeedableRng;
        let m = LinearGaussianModel::new(0.5, SymMat::zeros(1), 0.0, DVector::zeros(1), SymMat::zeros(1)).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let x = m.sample_transition(1, &DVector::from_vec(vec![4.0]), &mut rng);
        assert_eq!(x[0], 2.0);
    }
}
