use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{SpdFactor, SymMat};

/// Zero-mean Gaussian noise that tolerates a singular covariance: sampling
/// always works, densities need a positive-definite covariance.
#[derive(Clone, Debug)]
pub struct GaussianNoise {
    cov: SymMat,
    factor: Option<SpdFactor>,
    root: Root,
}

#[derive(Clone, Debug)]
enum Root {
    Diag(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl GaussianNoise {
    pub fn new(cov: SymMat) -> Self {
        let factor = match &cov {
            SymMat::Diag(v) if v.iter().all(|x| *x > 0.0) => Some(SpdFactor::diag(v.clone())),
            SymMat::Diag(_) => None,
            SymMat::Full(m) => nalgebra::Cholesky::new(m.clone()).map(|c| SpdFactor::Dense { l: c.unpack() }),
        };
        let root = match (&cov, &factor) {
            (SymMat::Diag(v), _) => Root::Diag(v.map(|x| x.max(0.0).sqrt())),
            (SymMat::Full(_), Some(SpdFactor::Dense { l })) => Root::Dense(l.clone()),
            (SymMat::Full(m), _) => {
                let eig = m.clone().symmetric_eigen();
                let s = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
                Root::Dense(&eig.eigenvectors * DMatrix::from_diagonal(&s))
            }
        };
        GaussianNoise { cov, factor, root }
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }

    pub fn cov(&self) -> &SymMat {
        &self.cov
    }

    pub fn factor(&self) -> Option<&SpdFactor> {
        self.factor.as_ref()
    }

    pub fn is_degenerate(&self) -> bool {
        self.factor.is_none()
    }

    /// `log N(residual; 0, cov)`; `-inf` for a singular covariance.
    pub fn log_density(&self, residual: &DVector<f64>) -> f64 {
        match &self.factor {
            Some(f) => f.gaussian_log_density(residual),
            None => f64::NEG_INFINITY,
        }
    }

    /// `cov⁻¹ residual`.
    pub fn precision_times(&self, residual: &DVector<f64>) -> DVector<f64> {
        self.factor
            .as_ref()
            .expect("precision of a singular Gaussian")
            .solve(residual)
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let eps = standard_normal(self.dim(), rng);
        self.color(&eps)
    }

    /// Maps a standard-normal vector to a draw of this noise.
    pub fn color(&self, eps: &DVector<f64>) -> DVector<f64> {
        match &self.root {
            Root::Diag(s) => s.component_mul(eps),
            Root::Dense(l) => l * eps,
        }
    }
}

pub fn standard_normal(d: usize, rng: &mut dyn RngCore) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}
