//! Symmetric and Jacobian matrix wrappers that keep diagonal structure when
//! it is available, plus SPD factorizations with a bounded jitter policy.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative jitter added to the diagonal when a Cholesky factorization fails.
pub const JITTER_REL: f64 = 1e-8;
/// Number of ×10 escalations after the first jittered attempt.
pub const JITTER_ESCALATIONS: usize = 3;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Symmetric matrix, stored either as its diagonal or densely.
#[derive(Clone, Debug, PartialEq)]
pub enum SymMat {
    Diag(DVector<f64>),
    Full(DMatrix<f64>),
}

impl SymMat {
    pub fn identity(d: usize) -> Self {
        SymMat::Diag(DVector::from_element(d, 1.0))
    }

    pub fn scaled_identity(d: usize, s: f64) -> Self {
        SymMat::Diag(DVector::from_element(d, s))
    }

    pub fn zeros(d: usize) -> Self {
        SymMat::Diag(DVector::zeros(d))
    }

    pub fn dim(&self) -> usize {
        match self {
            SymMat::Diag(v) => v.len(),
            SymMat::Full(m) => m.nrows(),
        }
    }

    pub fn is_diag(&self) -> bool {
        matches!(self, SymMat::Diag(_))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SymMat::Diag(v) => DMatrix::from_diagonal(v),
            SymMat::Full(m) => m.clone(),
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            SymMat::Diag(v) => v.clone(),
            SymMat::Full(m) => m.diagonal(),
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            SymMat::Diag(v) => v.sum(),
            SymMat::Full(m) => m.trace(),
        }
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SymMat::Diag(d) => d.component_mul(v),
            SymMat::Full(m) => m * v,
        }
    }

    pub fn scale(&self, s: f64) -> SymMat {
        match self {
            SymMat::Diag(v) => SymMat::Diag(v * s),
            SymMat::Full(m) => SymMat::Full(m * s),
        }
    }

    pub fn add(&self, other: &SymMat) -> SymMat {
        match (self, other) {
            (SymMat::Diag(a), SymMat::Diag(b)) => SymMat::Diag(a + b),
            (SymMat::Diag(a), SymMat::Full(b)) | (SymMat::Full(b), SymMat::Diag(a)) => {
                let mut m = b.clone();
                for i in 0..a.len() {
                    m[(i, i)] += a[i];
                }
                SymMat::Full(m)
            }
            (SymMat::Full(a), SymMat::Full(b)) => SymMat::Full(a + b),
        }
    }

    pub fn add_to_diagonal(&self, s: f64) -> SymMat {
        match self {
            SymMat::Diag(v) => SymMat::Diag(v.add_scalar(s)),
            SymMat::Full(m) => {
                let mut m = m.clone();
                for i in 0..m.nrows() {
                    m[(i, i)] += s;
                }
                SymMat::Full(m)
            }
        }
    }

    /// Adds `s * u uᵀ`; the result is dense unless `s == 0`.
    pub fn add_rank_one(&self, u: &DVector<f64>, s: f64) -> SymMat {
        if s == 0.0 {
            return self.clone();
        }
        let mut m = self.to_dense();
        m.ger(s, u, u, 1.0);
        SymMat::Full(m)
    }

    /// Cholesky-type factorization with the bounded jitter policy.
    pub fn factor(&self) -> Result<SpdFactor> {
        match self {
            SymMat::Diag(v) => {
                if v.iter().all(|x| *x > 0.0 && x.is_finite()) {
                    return Ok(SpdFactor::diag(v.clone()));
                }
                Err(Error::Numerical(
                    "diagonal covariance has non-positive entries".into(),
                ))
            }
            SymMat::Full(m) => cholesky_with_jitter(m).map(|l| SpdFactor::Dense { l }),
        }
    }

    /// Inverse of an SPD matrix, keeping the diagonal structure.
    pub fn inverse(&self) -> Result<SymMat> {
        match self {
            SymMat::Diag(v) => {
                if v.iter().any(|x| *x <= 0.0) {
                    return Err(Error::Numerical("singular diagonal matrix".into()));
                }
                Ok(SymMat::Diag(v.map(|x| 1.0 / x)))
            }
            SymMat::Full(_) => Ok(SymMat::Full(self.factor()?.inverse_dense())),
        }
    }

    /// Projects onto the SPD cone by flooring eigenvalues at `floor`.
    pub fn floor_eigenvalues(&self, floor: f64) -> SymMat {
        match self {
            SymMat::Diag(v) => SymMat::Diag(v.map(|x| if x.is_finite() && x > floor { x } else { floor })),
            SymMat::Full(m) => {
                let sym = (m + m.transpose()) * 0.5;
                if nalgebra::Cholesky::new(sym.clone()).is_some() {
                    let eig_min = sym.clone().symmetric_eigenvalues().min();
                    if eig_min >= floor {
                        return SymMat::Full(sym);
                    }
                }
                let eig = sym.symmetric_eigen();
                let vals = eig.eigenvalues.map(|x| if x > floor { x } else { floor });
                let q = &eig.eigenvectors;
                SymMat::Full(q * DMatrix::from_diagonal(&vals) * q.transpose())
            }
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        match self {
            SymMat::Diag(_) => true,
            SymMat::Full(m) => (m - m.transpose()).abs().max() <= tol * (1.0 + m.abs().max()),
        }
    }
}

fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = nalgebra::Cholesky::new(m.clone()) {
        return Ok(c.unpack());
    }
    let d = m.nrows().max(1) as f64;
    let scale = (m.trace() / d).abs().max(f64::MIN_POSITIVE);
    let mut jitter = JITTER_REL * scale;
    for _ in 0..=JITTER_ESCALATIONS {
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(c) = nalgebra::Cholesky::new(a) {
            return Ok(c.unpack());
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "matrix of size {} is not positive definite after jitter escalation",
        m.nrows()
    )))
}

/// Lower-triangular factor `L` with `LLᵀ = M`.
#[derive(Clone, Debug)]
pub enum SpdFactor {
    Diag { var: DVector<f64>, sd: DVector<f64> },
    Dense { l: DMatrix<f64> },
}

impl SpdFactor {
    pub fn diag(var: DVector<f64>) -> Self {
        let sd = var.map(f64::sqrt);
        SpdFactor::Diag { var, sd }
    }

    pub fn dim(&self) -> usize {
        match self {
            SpdFactor::Diag { var, .. } => var.len(),
            SpdFactor::Dense { l } => l.nrows(),
        }
    }

    pub fn log_det(&self) -> f64 {
        match self {
            SpdFactor::Diag { var, .. } => var.iter().map(|v| v.ln()).sum(),
            SpdFactor::Dense { l } => 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        }
    }

    /// `M⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SpdFactor::Diag { var, .. } => v.component_div(var),
            SpdFactor::Dense { l } => {
                let w = l.solve_lower_triangular(v).expect("non-singular factor");
                l.tr_solve_lower_triangular(&w).expect("non-singular factor")
            }
        }
    }

    /// `M⁻¹ B` for a dense right-hand side.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SpdFactor::Diag { var, .. } => {
                let mut out = b.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row /= var[i];
                }
                out
            }
            SpdFactor::Dense { l } => {
                let w = l.solve_lower_triangular(b).expect("non-singular factor");
                l.tr_solve_lower_triangular(&w).expect("non-singular factor")
            }
        }
    }

    /// `L⁻¹ v`.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SpdFactor::Diag { sd, .. } => v.component_div(sd),
            SpdFactor::Dense { l } => l.solve_lower_triangular(v).expect("non-singular factor"),
        }
    }

    /// `L v`, used to color standard-normal draws.
    pub fn color(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SpdFactor::Diag { sd, .. } => sd.component_mul(v),
            SpdFactor::Dense { l } => l * v,
        }
    }

    /// `vᵀ M⁻¹ v`.
    pub fn mahalanobis_sq(&self, v: &DVector<f64>) -> f64 {
        self.whiten(v).norm_squared()
    }

    pub fn inverse_dense(&self) -> DMatrix<f64> {
        match self {
            SpdFactor::Diag { var, .. } => DMatrix::from_diagonal(&var.map(|x| 1.0 / x)),
            SpdFactor::Dense { l } => {
                let n = l.nrows();
                let li = l
                    .solve_lower_triangular(&DMatrix::identity(n, n))
                    .expect("non-singular factor");
                li.transpose() * li
            }
        }
    }

    /// Diagonal of `M⁻¹`.
    pub fn inverse_diagonal(&self) -> DVector<f64> {
        match self {
            SpdFactor::Diag { var, .. } => var.map(|x| 1.0 / x),
            SpdFactor::Dense { .. } => self.inverse_dense().diagonal(),
        }
    }

    /// Gaussian log-density of a residual `x - mean` under covariance `M`.
    pub fn gaussian_log_density(&self, residual: &DVector<f64>) -> f64 {
        let d = self.dim() as f64;
        -0.5 * (d * LN_2PI + self.log_det() + self.mahalanobis_sq(residual))
    }
}

/// Measurement Jacobian `∂h/∂x` (rows = observation dim).
#[derive(Clone, Debug, PartialEq)]
pub enum Jacobian {
    Diag(DVector<f64>),
    Full(DMatrix<f64>),
}

impl Jacobian {
    pub fn nrows(&self) -> usize {
        match self {
            Jacobian::Diag(v) => v.len(),
            Jacobian::Full(m) => m.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            Jacobian::Diag(v) => v.len(),
            Jacobian::Full(m) => m.ncols(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Jacobian::Diag(v) => DMatrix::from_diagonal(v),
            Jacobian::Full(m) => m.clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Jacobian::Diag(v) => v.iter().all(|x| *x == 0.0),
            Jacobian::Full(m) => m.iter().all(|x| *x == 0.0),
        }
    }

    /// `H v`.
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Jacobian::Diag(h) => h.component_mul(v),
            Jacobian::Full(m) => m * v,
        }
    }

    /// `Hᵀ u`.
    pub fn tr_mul_vec(&self, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Jacobian::Diag(h) => h.component_mul(u),
            Jacobian::Full(m) => m.tr_mul(u),
        }
    }

    /// `H P Hᵀ`.
    pub fn sandwich(&self, p: &SymMat) -> SymMat {
        match (self, p) {
            (Jacobian::Diag(h), SymMat::Diag(pd)) => SymMat::Diag(h.component_mul(h).component_mul(pd)),
            (Jacobian::Diag(h), SymMat::Full(pm)) => {
                let mut m = pm.clone();
                for j in 0..m.ncols() {
                    for i in 0..m.nrows() {
                        m[(i, j)] *= h[i] * h[j];
                    }
                }
                SymMat::Full(m)
            }
            (Jacobian::Full(hm), _) => {
                let ph = p_times_ht(p, hm);
                let mut m = hm * ph;
                symmetrize(&mut m);
                SymMat::Full(m)
            }
        }
    }

    /// `Hᵀ M H` for a symmetric `M` in observation space.
    pub fn congruence(&self, m: &SymMat) -> SymMat {
        match (self, m) {
            (Jacobian::Diag(h), SymMat::Diag(md)) => SymMat::Diag(h.component_mul(h).component_mul(md)),
            _ => {
                let h = self.to_dense();
                let mut out = h.transpose() * m.to_dense() * h;
                symmetrize(&mut out);
                SymMat::Full(out)
            }
        }
    }
}

fn p_times_ht(p: &SymMat, h: &DMatrix<f64>) -> DMatrix<f64> {
    match p {
        SymMat::Diag(pd) => {
            let mut ht = h.transpose();
            for (i, mut row) in ht.row_iter_mut().enumerate() {
                row *= pd[i];
            }
            ht
        }
        SymMat::Full(pm) => pm * h.transpose(),
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Empirical mean and (biased-free, `n - 1`) covariance of a sample set.
pub fn sample_moments(samples: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len();
    let d = samples.first().map_or(0, |s| s.len());
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += s;
    }
    mean /= n.max(1) as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for s in samples {
            let r = s - &mean;
            cov.ger(1.0, &r, &r, 1.0);
        }
        cov /= (n - 1) as f64;
    }
    (mean, cov)
}

/// `log(Σ exp(v))` computed stably; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Natural log of the 2-norm condition number via singular values.
pub fn log_condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        (max / min).ln()
    }
}

pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, factor: &SpdFactor) -> f64 {
    factor.gaussian_log_density(&(x - mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 / 5.0 - 0.4);
        &a * a.transpose() + DMatrix::identity(n, n)
    }

    #[test]
    fn dense_factor_solves_and_log_det() {
        let m = spd(6);
        let f = SymMat::Full(m.clone()).factor().unwrap();
        let v = DVector::from_fn(6, |i, _| i as f64 - 2.0);
        let x = f.solve(&v);
        assert!((&m * &x - &v).norm() < 1e-12);
        let det = m.clone().lu().determinant();
        assert!((f.log_det() - det.ln()).abs() < 1e-12);
        let q = v.dot(&(m.clone().try_inverse().unwrap() * &v));
        assert!((f.mahalanobis_sq(&v) - q).abs() < 1e-10);
    }

    #[test]
    fn jitter_repairs_semidefinite() {
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = &u * u.transpose();
        let f = SymMat::Full(m).factor();
        assert!(f.is_ok());
    }

    #[test]
    fn jitter_gives_up_on_indefinite() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(SymMat::Full(m).factor().is_err());
    }

    #[test]
    fn sandwich_matches_dense() {
        let p = SymMat::Full(spd(4));
        let h = Jacobian::Diag(DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0]));
        let dense = h.to_dense() * p.to_dense() * h.to_dense().transpose();
        assert!((h.sandwich(&p).to_dense() - dense).abs().max() < 1e-12);
        let hf = Jacobian::Full(DMatrix::from_fn(3, 4, |i, j| (i + 2 * j) as f64 * 0.1));
        let dense = hf.to_dense() * p.to_dense() * hf.to_dense().transpose();
        assert!((hf.sandwich(&p).to_dense() - dense).abs().max() < 1e-12);
    }

    #[test]
    fn eigen_floor_is_spd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let f = SymMat::Full(m).floor_eigenvalues(1e-8);
        assert!(f.to_dense().symmetric_eigenvalues().min() >= 1e-8 * 0.99);
    }

    #[test]
    fn log_sum_exp_basic() {
        assert!((log_sum_exp(&[0.0, 3f64.ln()]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
