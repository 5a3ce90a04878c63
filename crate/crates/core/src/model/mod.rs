//! State-space model abstraction and the benchmark models.
//!
//! Time steps are 1-based: the transition into step `k` is `p(x_k | x_{k-1})`.

mod gaussian;
mod gmm;
mod linear;
mod spatial;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::linalg::{Jacobian, SymMat};

pub use gaussian::{standard_normal, GaussianNoise};
pub use gmm::{sample_categorical, DynamicMap, GmmModel, GmmNoiseSpec, MeasurementMap};
pub use linear::{build_linear_gaussian_model, LinearGaussianModel};
pub use spatial::{
    build_dispersion_matrix, grid_locations, poisson_count_log_likelihood, GhSkewT, GhSkewTParams,
    PoissonCounts, SpatialSensorModel,
};

/// Exact linear-Gaussian description used by the Kalman filter and the
/// analytic evidence oracle.
#[derive(Clone, Debug)]
pub struct LinearGaussianView {
    pub transition: DMatrix<f64>,
    pub process_cov: SymMat,
    pub observation: DMatrix<f64>,
    pub measurement_cov: SymMat,
}

pub trait StateSpaceModel: Send + Sync {
    fn dim_state(&self) -> usize;
    fn dim_obs(&self) -> usize;

    /// Noise-free prediction `E[x_k | x_{k-1}]`, the flow's auxiliary start point.
    fn predict_mean(&self, k: usize, x_prev: &DVector<f64>) -> DVector<f64>;
    /// `∂ predict_mean / ∂ x_{k-1}`, used by the EKF.
    fn transition_jacobian(&self, k: usize, x_prev: &DVector<f64>) -> DMatrix<f64>;
    fn transition_log_density(&self, k: usize, x: &DVector<f64>, x_prev: &DVector<f64>) -> f64;
    /// `∇_x log p(x_k | x_{k-1})` with respect to the current state.
    fn transition_log_density_gradient(
        &self,
        k: usize,
        x: &DVector<f64>,
        x_prev: &DVector<f64>,
    ) -> DVector<f64>;
    fn sample_transition(&self, k: usize, x_prev: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64>;
    /// Process covariance, or its moment-matched equivalent.
    fn transition_covariance(&self) -> SymMat;
    /// Constant precision used as the prior part of the mHMC metric.
    fn prior_precision(&self) -> SymMat;

    fn measurement_mean(&self, x: &DVector<f64>) -> DVector<f64>;
    fn measurement_jacobian(&self, x: &DVector<f64>) -> Jacobian;
    /// Measurement covariance, moment-matched at `x` for non-Gaussian likelihoods.
    fn measurement_covariance(&self, x: &DVector<f64>) -> SymMat;
    /// True when `h` is affine and `R` constant, so flows can share work.
    fn measurement_is_linear(&self) -> bool {
        false
    }
    fn log_likelihood(&self, z: &DVector<f64>, x: &DVector<f64>) -> f64;
    fn log_likelihood_gradient(&self, z: &DVector<f64>, x: &DVector<f64>) -> DVector<f64>;
    fn sample_measurement(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64>;
    /// Expected Fisher information of the likelihood at `x`.
    fn likelihood_fisher(&self, x: &DVector<f64>) -> SymMat;
    /// Element-wise `∂F_ii/∂x_i` for a diagonal Fisher that varies with `x`;
    /// `None` when the Fisher information is constant.
    fn likelihood_fisher_derivative(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }

    fn initial_mean(&self) -> DVector<f64>;
    /// Prior covariance of `x_0`; all zeros means a known starting point.
    fn initial_covariance(&self) -> SymMat;
    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64>;

    fn linear_gaussian(&self) -> Option<LinearGaussianView> {
        None
    }
}

/// Checks a gradient against central differences of `f`; returns the largest
/// relative error, scaled by `max(1, |g|)`.
pub fn finite_difference_error(
    f: &dyn Fn(&DVector<f64>) -> f64,
    grad: &DVector<f64>,
    x: &DVector<f64>,
    step: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        let h = step * (1.0 + x[i].abs());
        xp[i] += h;
        xm[i] -= h;
        let fd = (f(&xp) - f(&xm)) / (2.0 * h);
        let err = (fd - grad[i]).abs() / grad[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
