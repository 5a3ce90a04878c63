use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, SpdFactor, SymMat};
use crate::model::StateSpaceModel;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean and covariance of a Gaussian filtering distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        GaussianBelief { mean, cov }
    }

    pub fn from_model_prior(model: &dyn StateSpaceModel) -> Self {
        GaussianBelief {
            mean: model.initial_mean(),
            cov: model.initial_covariance().to_dense(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn factor_dense(m: &DMatrix<f64>, what: &str) -> Result<SpdFactor> {
    SymMat::Full(m.clone())
        .factor()
        .map_err(|e| Error::Numerical(format!("{what}: {e}")))
}

/// Gaussian update with innovation `y`, Jacobian `h`, noise `r` and an
/// optional state–measurement cross-covariance (defaults to `P Hᵀ`).
/// Returns the posterior and `log N(y; 0, S)`.
fn gaussian_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    innovation: &DVector<f64>,
    s: DMatrix<f64>,
    cross: DMatrix<f64>,
) -> Result<(GaussianBelief, f64)> {
    let mut s = s;
    symmetrize(&mut s);
    let sf = factor_dense(&s, "innovation covariance")?;
    let log_inc = -0.5 * (innovation.len() as f64 * LN_2PI + sf.log_det() + sf.mahalanobis_sq(innovation));
    // K = C S⁻¹, computed as (S⁻¹ Cᵀ)ᵀ
    let gain = sf.solve_matrix(&cross.transpose()).transpose();
    let new_mean = mean + &gain * innovation;
    let mut new_cov = cov - &gain * s * gain.transpose();
    symmetrize(&mut new_cov);
    Ok((GaussianBelief::new(new_mean, new_cov), log_inc))
}

/// Kalman predict/update for a linear-Gaussian model; also returns the exact
/// log-evidence increment `log N(z; H m⁻, H P⁻ Hᵀ + R)`.
pub fn kalman_step(
    belief: &GaussianBelief,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
) -> Result<(GaussianBelief, f64)> {
    let lg = model
        .linear_gaussian()
        .ok_or_else(|| Error::Usage("Kalman filter requires a linear-Gaussian model".into()))?;
    let f = &lg.transition;
    let pred_mean = f * &belief.mean;
    let mut pred_cov = f * &belief.cov * f.transpose() + lg.process_cov.to_dense();
    symmetrize(&mut pred_cov);
    let h = &lg.observation;
    let innovation = z - h * &pred_mean;
    let cross = &pred_cov * h.transpose();
    let s = h * &cross + lg.measurement_cov.to_dense();
    gaussian_update(&pred_mean, &pred_cov, &innovation, s, cross)
}

/// Extended Kalman filter step linearized at the predicted mean. Non-Gaussian
/// likelihoods use the model's moment-matched measurement covariance.
pub fn ekf_step(
    belief: &GaussianBelief,
    k: usize,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
) -> Result<GaussianBelief> {
    let f = model.transition_jacobian(k, &belief.mean);
    let pred_mean = model.predict_mean(k, &belief.mean);
    let mut pred_cov = &f * &belief.cov * f.transpose() + model.transition_covariance().to_dense();
    symmetrize(&mut pred_cov);
    let h = model.measurement_jacobian(&pred_mean).to_dense();
    let innovation = z - model.measurement_mean(&pred_mean);
    let cross = &pred_cov * h.transpose();
    let s = &h * &cross + model.measurement_covariance(&pred_mean).to_dense();
    gaussian_update(&pred_mean, &pred_cov, &innovation, s, cross).map(|(b, _)| b)
}

/// Scaled unscented-transform parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UkfParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UkfParams {
    fn default() -> Self {
        UkfParams {
            alpha: 1e-3,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

/// Sigma points with mean and covariance weights.
#[derive(Clone, Debug)]
pub struct SigmaPoints {
    pub points: Vec<DVector<f64>>,
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
}

impl SigmaPoints {
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>, params: UkfParams) -> Result<Self> {
        let d = mean.len() as f64;
        let lambda = params.alpha * params.alpha * (d + params.kappa) - d;
        let spread = d + lambda;
        if spread <= 0.0 {
            return Err(Error::Parameter("unscented spread d + lambda must be positive".into()));
        }
        let root = match factor_dense(&(cov * spread), "sigma-point covariance")? {
            SpdFactor::Dense { l } => l,
            SpdFactor::Diag { sd, .. } => DMatrix::from_diagonal(&sd),
        };
        let mut points = Vec::with_capacity(2 * mean.len() + 1);
        points.push(mean.clone());
        for j in 0..mean.len() {
            points.push(mean + root.column(j));
        }
        for j in 0..mean.len() {
            points.push(mean - root.column(j));
        }
        let w0 = lambda / spread;
        let wi = 0.5 / spread;
        let mut mean_weights = vec![wi; points.len()];
        mean_weights[0] = w0;
        let mut cov_weights = mean_weights.clone();
        cov_weights[0] = w0 + 1.0 - params.alpha * params.alpha + params.beta;
        Ok(SigmaPoints {
            points,
            mean_weights,
            cov_weights,
        })
    }

    /// Pushes the points through `f`; returns the transformed mean,
    /// covariance and the cross-covariance with the input.
    pub fn transform(
        &self,
        f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mapped: Vec<DVector<f64>> = self.points.iter().map(f).collect();
        let m = mapped[0].len();
        let d = self.points[0].len();
        let mut out_mean = DVector::zeros(m);
        for (y, w) in mapped.iter().zip(&self.mean_weights) {
            out_mean += y * *w;
        }
        let in_mean = {
            let mut acc = DVector::zeros(d);
            for (x, w) in self.points.iter().zip(&self.mean_weights) {
                acc += x * *w;
            }
            acc
        };
        let mut cov = DMatrix::zeros(m, m);
        let mut cross = DMatrix::zeros(d, m);
        for ((y, x), w) in mapped.iter().zip(&self.points).zip(&self.cov_weights) {
            let dy = y - &out_mean;
            let dx = x - &in_mean;
            cov.ger(*w, &dy, &dy, 1.0);
            cross.ger(*w, &dx, &dy, 1.0);
        }
        symmetrize(&mut cov);
        (out_mean, cov, cross)
    }
}

/// Unscented Kalman filter step. The measurement noise covariance is taken
/// at the predicted mean.
pub fn ukf_step(
    belief: &GaussianBelief,
    k: usize,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
    params: UkfParams,
) -> Result<GaussianBelief> {
    let sp = SigmaPoints::new(&belief.mean, &belief.cov, params)?;
    let (pred_mean, pred_cov0, _) = sp.transform(&|x| model.predict_mean(k, x));
    let mut pred_cov = pred_cov0 + model.transition_covariance().to_dense();
    symmetrize(&mut pred_cov);
    let sp2 = SigmaPoints::new(&pred_mean, &pred_cov, params)?;
    let (z_mean, z_cov, cross) = sp2.transform(&|x| model.measurement_mean(x));
    let s = z_cov + model.measurement_covariance(&pred_mean).to_dense();
    let innovation = z - z_mean;
    gaussian_update(&pred_mean, &pred_cov, &innovation, s, cross).map(|(b, _)| b)
}
