//! Manifold Hamiltonian Monte Carlo refinement of the current state.
//!
//! Kinetic energy `½ pᵀ G⁻¹ p + ½ log det G` with `G` the likelihood Fisher
//! information plus a prior precision. Two metric modes: a constant `G`
//! fixed by the caller for the whole time step (plain leapfrog with mass
//! matrix `G`), or a diagonal position-dependent `G(x)` integrated with the
//! implicit generalized leapfrog.

use nalgebra::DVector;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{SpdFactor, SymMat};
use crate::model::{standard_normal, GmmModel, StateSpaceModel};

/// Eigenvalue floor applied to every metric.
pub const METRIC_FLOOR: f64 = 1e-8;

/// Relative tolerance for the implicit half-steps.
const FIXED_POINT_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    PositionDependent,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhmcConfig {
    pub step_size: f64,
    pub n_leapfrog: usize,
    pub fixed_point_iters: usize,
    pub metric_mode: MetricMode,
    /// Each proposal uses `step_size · (1 + jitter · U(-1, 1))`; 0 disables.
    #[serde(default)]
    pub step_jitter: f64,
}

impl MhmcConfig {
    /// Leapfrog step `scale · d^{-1/4}`, 20 steps, 30 fixed-point iterations,
    /// no jitter.
    pub fn for_dim(d: usize, scale: f64, metric_mode: MetricMode) -> Self {
        MhmcConfig {
            step_size: scale * (d.max(1) as f64).powf(-0.25),
            n_leapfrog: 20,
            fixed_point_iters: 30,
            metric_mode,
            step_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("mhmc_step_size must be positive, got {}", self.step_size)));
        }
        if self.n_leapfrog == 0 {
            return Err(Error::Config("mhmc_n_leapfrog must be at least 1".into()));
        }
        if self.fixed_point_iters == 0 {
            return Err(Error::Config("mhmc_fixed_point_iters must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return Err(Error::Config(format!("mhmc_step_jitter must lie in [0, 1), got {}", self.step_jitter)));
        }
        Ok(())
    }
}

/// SPD metric with its factorization and log-determinant.
#[derive(Clone, Debug)]
pub struct MetricTensor {
    g: SymMat,
    factor: SpdFactor,
}

impl MetricTensor {
    /// Floors eigenvalues at [`METRIC_FLOOR`] and factors.
    pub fn new(g: SymMat) -> Result<Self> {
        let g = g.floor_eigenvalues(METRIC_FLOOR);
        let factor = g.factor().map_err(|e| Error::Metric(e.to_string()))?;
        Ok(MetricTensor { g, factor })
    }

    pub fn matrix(&self) -> &SymMat {
        &self.g
    }

    pub fn log_det(&self) -> f64 {
        self.factor.log_det()
    }

    pub fn dim(&self) -> usize {
        self.g.dim()
    }

    /// `G⁻¹ p`.
    pub fn velocity(&self, p: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(p)
    }

    /// `½ pᵀ G⁻¹ p + ½ log det G`.
    pub fn kinetic(&self, p: &DVector<f64>) -> f64 {
        0.5 * self.factor.mahalanobis_sq(p) + 0.5 * self.log_det()
    }

    /// `p ~ N(0, G)`.
    pub fn sample_momentum(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        self.factor.color(&standard_normal(self.dim(), rng))
    }
}

/// Density targeted by the refinement move together with its metric.
pub trait RefinementTarget {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Unfloored `G(x)`.
    fn metric(&self, x: &DVector<f64>) -> SymMat;
    /// `∂G_ii/∂x_i` when `G` is diagonal with each entry depending only on
    /// its own coordinate; `None` for a constant metric.
    fn metric_diag_derivative(&self, x: &DVector<f64>) -> Option<DVector<f64>>;
}

/// `p(x | x_prev) p(z | x)` for a generic model.
pub struct ModelTarget<'a> {
    pub model: &'a dyn StateSpaceModel,
    pub k: usize,
    pub x_prev: &'a DVector<f64>,
    pub z: &'a DVector<f64>,
}

impl RefinementTarget for ModelTarget<'_> {
    fn dim(&self) -> usize {
        self.model.dim_state()
    }
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        self.model.transition_log_density(self.k, x, self.x_prev) + self.model.log_likelihood(self.z, x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.model.transition_log_density_gradient(self.k, x, self.x_prev) + self.model.log_likelihood_gradient(self.z, x)
    }
    fn metric(&self, x: &DVector<f64>) -> SymMat {
        self.model.likelihood_fisher(x).add(&self.model.prior_precision())
    }
    fn metric_diag_derivative(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        if self.model.prior_precision().is_diag() {
            self.model.likelihood_fisher_derivative(x)
        } else {
            None
        }
    }
}

/// `p(x | x_prev, d = m) p(z | x, c = n)` for a Gaussian-mixture model.
pub struct GmmComponentTarget<'a> {
    pub model: &'a GmmModel,
    pub k: usize,
    pub x_prev: &'a DVector<f64>,
    pub z: &'a DVector<f64>,
    pub process_component: usize,
    pub noise_component: usize,
}

impl RefinementTarget for GmmComponentTarget<'_> {
    fn dim(&self) -> usize {
        self.model.dim_state()
    }
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        self.model.component_transition_log_density(self.k, x, self.x_prev, self.process_component)
            + self.model.component_log_likelihood(self.z, x, self.noise_component)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.model.component_transition_gradient(self.k, x, self.x_prev, self.process_component)
            + self.model.component_likelihood_gradient(self.z, x, self.noise_component)
    }
    fn metric(&self, x: &DVector<f64>) -> SymMat {
        self.model
            .component_fisher(x, self.noise_component)
            .add(self.model.component_prior_precision(self.process_component))
    }
    fn metric_diag_derivative(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        if self.model.component_prior_precision(self.process_component).is_diag() {
            self.model.component_fisher_derivative(x, self.noise_component)
        } else {
            None
        }
    }
}

/// Metric built from the target at `x`.
pub fn metric_tensor(target: &dyn RefinementTarget, x: &DVector<f64>) -> Result<MetricTensor> {
    MetricTensor::new(target.metric(x))
}

/// Metric source for one proposal.
pub enum Metric<'a> {
    /// Constant metric, fixed independently of the chain state.
    Fixed(&'a MetricTensor),
    /// Diagonal `G(x)` re-evaluated along the trajectory.
    PositionDependent,
}

#[derive(Clone, Debug)]
pub struct MhmcOutcome {
    pub x: DVector<f64>,
    pub accepted: bool,
    /// `log ρ₃` before clamping at zero; `-inf` when the integrator failed.
    pub log_accept_ratio: f64,
    pub proposal: Option<DVector<f64>>,
}

/// Floored diagonal of `G(x)` and `∂G_ii/∂x_i`, zeroed where the floor binds.
fn diag_metric(target: &dyn RefinementTarget, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let SymMat::Diag(g) = target.metric(x) else {
        return Err(Error::Metric("position-dependent metric must be diagonal".into()));
    };
    let dg = target
        .metric_diag_derivative(x)
        .unwrap_or_else(|| DVector::zeros(g.len()));
    let mut gf = g.clone();
    let mut dgf = dg;
    for i in 0..gf.len() {
        if !(gf[i] > METRIC_FLOOR) || !gf[i].is_finite() {
            gf[i] = METRIC_FLOOR;
            dgf[i] = 0.0;
        }
    }
    Ok((gf, dgf))
}

/// `−log π(x) + ½ Σ log g_i + ½ Σ p_i² / g_i`.
fn hamiltonian_diag(target: &dyn RefinementTarget, x: &DVector<f64>, p: &DVector<f64>) -> Result<f64> {
    let (g, _) = diag_metric(target, x)?;
    let kin: f64 = p.iter().zip(g.iter()).map(|(pi, gi)| 0.5 * pi * pi / gi + 0.5 * gi.ln()).sum();
    Ok(-target.log_density(x) + kin)
}

/// `∂H/∂x` for a diagonal position-dependent metric.
fn dh_dx(grad: &DVector<f64>, g: &DVector<f64>, dg: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(grad.len(), |i, _| {
        let v = p[i] / g[i];
        -grad[i] + 0.5 * dg[i] / g[i] - 0.5 * v * v * dg[i]
    })
}

fn converged(change: f64, scale: f64) -> bool {
    change <= FIXED_POINT_TOL * (1.0 + scale)
}

/// Generalized leapfrog for a diagonal `G(x)`; implicit half-steps are solved
/// by fixed-point iteration and a non-converged solve is an integrator error.
pub fn generalized_leapfrog(
    target: &dyn RefinementTarget,
    x0: &DVector<f64>,
    p0: &DVector<f64>,
    config: &MhmcConfig,
) -> Result<(DVector<f64>, DVector<f64>)> {
    config.validate()?;
    let eps = config.step_size;
    let mut x = x0.clone();
    let mut p = p0.clone();
    let mut grad = target.gradient(&x);
    let (mut g, mut dg) = diag_metric(target, &x)?;
    for _ in 0..config.n_leapfrog {
        // p_half = p − (ε/2) ∂H/∂x(x, p_half)
        let mut ph = p.clone();
        let mut ok = false;
        for _ in 0..config.fixed_point_iters {
            let next = &p - dh_dx(&grad, &g, &dg, &ph) * (0.5 * eps);
            let change = (&next - &ph).amax();
            ph = next;
            if converged(change, ph.amax()) {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Integrator("momentum half-step".into()));
        }
        // x' = x + (ε/2) (G⁻¹(x) + G⁻¹(x')) p_half
        let v0 = ph.component_div(&g);
        let mut xn = &x + &v0 * eps;
        ok = false;
        for _ in 0..config.fixed_point_iters {
            if xn.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integrator("trajectory diverged".into()));
            }
            let (gn, _) = diag_metric(target, &xn)?;
            let next = &x + (&v0 + ph.component_div(&gn)) * (0.5 * eps);
            let change = (&next - &xn).amax();
            xn = next;
            if converged(change, xn.amax()) {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Integrator("position step".into()));
        }
        if xn.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrator("trajectory diverged".into()));
        }
        x = xn;
        grad = target.gradient(&x);
        let (gn, dgn) = diag_metric(target, &x)?;
        g = gn;
        dg = dgn;
        p = &ph - dh_dx(&grad, &g, &dg, &ph) * (0.5 * eps);
        if x.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Integrator("trajectory diverged".into()));
        }
    }
    Ok((x, p))
}

/// Standard leapfrog with constant mass matrix `G`.
pub fn leapfrog(
    target: &dyn RefinementTarget,
    metric: &MetricTensor,
    x0: &DVector<f64>,
    p0: &DVector<f64>,
    config: &MhmcConfig,
) -> Result<(DVector<f64>, DVector<f64>)> {
    config.validate()?;
    let eps = config.step_size;
    let mut x = x0.clone();
    let mut p = p0.clone();
    let mut grad = target.gradient(&x);
    for _ in 0..config.n_leapfrog {
        p += &grad * (0.5 * eps);
        x += metric.velocity(&p) * eps;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrator("trajectory diverged".into()));
        }
        grad = target.gradient(&x);
        p += &grad * (0.5 * eps);
        if x.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Integrator("trajectory diverged".into()));
        }
    }
    Ok((x, p))
}

/// Hamiltonian `−log π(x) + K(x, p)` under the given metric source.
pub fn hamiltonian(target: &dyn RefinementTarget, metric: &Metric, x: &DVector<f64>, p: &DVector<f64>) -> Result<f64> {
    match metric {
        Metric::Fixed(m) => Ok(-target.log_density(x) + m.kinetic(p)),
        Metric::PositionDependent => hamiltonian_diag(target, x, p),
    }
}

/// Integrates a trajectory from `(x, p)` with the configured integrator.
pub fn integrate(
    target: &dyn RefinementTarget,
    metric: &Metric,
    x: &DVector<f64>,
    p: &DVector<f64>,
    config: &MhmcConfig,
) -> Result<(DVector<f64>, DVector<f64>)> {
    match metric {
        Metric::Fixed(m) => leapfrog(target, m, x, p, config),
        Metric::PositionDependent => generalized_leapfrog(target, x, p, config),
    }
}

/// One mHMC move: momentum `p ~ N(0, G)`, `L` integrator steps, MH test on
/// the joint Hamiltonian. Integrator failures reject.
pub fn mhmc_propose_accept(
    x: &DVector<f64>,
    target: &dyn RefinementTarget,
    config: &MhmcConfig,
    metric: Metric,
    rng: &mut dyn RngCore,
) -> Result<MhmcOutcome> {
    config.validate()?;
    let p0 = match &metric {
        Metric::Fixed(m) => m.sample_momentum(rng),
        Metric::PositionDependent => {
            let (g, _) = diag_metric(target, x)?;
            standard_normal(x.len(), rng).component_mul(&g.map(f64::sqrt))
        }
    };
    let u: f64 = rng.random();
    let mut cfg = *config;
    if config.step_jitter > 0.0 {
        let v: f64 = rng.random();
        cfg.step_size *= 1.0 + config.step_jitter * (2.0 * v - 1.0);
    }
    let h0 = hamiltonian(target, &metric, x, &p0)?;
    let (log_ratio, proposal) = match integrate(target, &metric, x, &p0, &cfg) {
        Ok((x1, p1)) => {
            let h1 = hamiltonian(target, &metric, &x1, &p1)?;
            let lr = h0 - h1;
            (if lr.is_nan() { f64::NEG_INFINITY } else { lr }, Some(x1))
        }
        Err(Error::Integrator(_)) => (f64::NEG_INFINITY, None),
        Err(e) => return Err(e),
    };
    let accepted = proposal.is_some() && u.ln() < log_ratio.min(0.0);
    Ok(MhmcOutcome {
        x: if accepted { proposal.clone().expect("accepted proposal") } else { x.clone() },
        accepted,
        log_accept_ratio: log_ratio,
        proposal,
    })
}
