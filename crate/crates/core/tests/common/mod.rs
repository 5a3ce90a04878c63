#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use smcmc_flow::linalg::SymMat;
use smcmc_flow::model::{
    build_dispersion_matrix, build_linear_gaussian_model, finite_difference_error, grid_locations, standard_normal, GmmModel,
    LinearGaussianModel, PoissonCounts, SpatialSensorModel, StateSpaceModel,
};

pub fn linear_model(d: usize) -> LinearGaussianModel {
    let sigma = build_dispersion_matrix(&grid_locations(d).unwrap(), 3.0, 0.01, 20.0).unwrap();
    build_linear_gaussian_model(d, 0.9, SymMat::Full(sigma), 0.5).unwrap()
}

pub fn spatial_model(d: usize) -> SpatialSensorModel {
    SpatialSensorModel::on_grid(d, 0.9, 7.0, 0.3, 3.0, 0.01, 20.0, PoissonCounts { m1: 1.0, m2: 1.0 / 3.0 }).unwrap()
}

pub fn gmm_model(d: usize) -> GmmModel {
    GmmModel::benchmark(d, &[-1.0, 0.0, 1.0], 0.5, &[-3.0, 0.0, 3.0], 0.1).unwrap()
}

/// Largest central-difference discrepancies over `points` random states.
#[derive(Debug, Default, Clone, Copy)]
pub struct DerivativeErrors {
    pub transition_gradient: f64,
    pub likelihood_gradient: f64,
    pub measurement_jacobian: f64,
    pub fisher: f64,
    pub fisher_derivative: f64,
}

impl DerivativeErrors {
    pub fn max(&self) -> f64 {
        [self.transition_gradient, self.likelihood_gradient, self.measurement_jacobian, self.fisher, self.fisher_derivative]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

const FD_STEP: f64 = 1e-5;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Jacobian of `f` by central differences, `m × d`.
pub fn fd_jacobian(f: &dyn Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let m = f(x).len();
    let mut j = DMatrix::zeros(m, x.len());
    for i in 0..x.len() {
        let h = FD_STEP * (1.0 + x[i].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        j.set_column(i, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    j
}

fn matrix_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max)
}

/// Checks transition and likelihood gradients, the measurement Jacobian,
/// the Fisher term (against `Hᵀ R⁻¹ H` built from the finite-difference
/// Jacobian, or against the negative Hessian when `hessian_fisher`) and the
/// Fisher diagonal derivative.
pub fn model_derivative_errors(
    model: &dyn StateSpaceModel,
    points: usize,
    state_scale: f64,
    hessian_fisher: bool,
    rng: &mut dyn RngCore,
) -> DerivativeErrors {
    let d = model.dim_state();
    let mut e = DerivativeErrors::default();
    for p in 0..points {
        let k = 1 + p % 5;
        let x_prev = standard_normal(d, rng) * state_scale;
        let x = model.predict_mean(k, &x_prev) + standard_normal(d, rng) * state_scale;
        let z = model.sample_measurement(&x, rng);

        let g = model.transition_log_density_gradient(k, &x, &x_prev);
        e.transition_gradient = e
            .transition_gradient
            .max(finite_difference_error(&|y| model.transition_log_density(k, y, &x_prev), &g, &x, FD_STEP));
        let gl = model.log_likelihood_gradient(&z, &x);
        e.likelihood_gradient = e
            .likelihood_gradient
            .max(finite_difference_error(&|y| model.log_likelihood(&z, y), &gl, &x, FD_STEP));

        let jac_fd = fd_jacobian(&|y| model.measurement_mean(y), &x);
        let jac = model.measurement_jacobian(&x).to_dense();
        e.measurement_jacobian = e.measurement_jacobian.max(matrix_error(&jac, &jac_fd));

        let fisher = model.likelihood_fisher(&x).to_dense();
        let reference = if hessian_fisher {
            -fd_jacobian(&|y| model.log_likelihood_gradient(&z, y), &x)
        } else {
            let r = model.measurement_covariance(&x).to_dense();
            let rinv = r.try_inverse().expect("invertible R");
            jac_fd.transpose() * rinv * &jac_fd
        };
        e.fisher = e.fisher.max(matrix_error(&fisher, &reference));

        let diag_fd = fd_jacobian(&|y| model.likelihood_fisher(y).diagonal(), &x).diagonal();
        let diag = model
            .likelihood_fisher_derivative(&x)
            .unwrap_or_else(|| DVector::zeros(d));
        e.fisher_derivative = e
            .fisher_derivative
            .max(diag.iter().zip(diag_fd.iter()).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max));
    }
    e
}

/// Per-component checks for a Gaussian-mixture model.
pub fn gmm_component_errors(model: &GmmModel, points: usize, rng: &mut dyn RngCore) -> DerivativeErrors {
    let d = model.dim_state();
    let mut e = DerivativeErrors::default();
    for p in 0..points {
        let k = 1 + p % 5;
        let m = p % model.n_process_components();
        let n = (p / 3) % model.n_noise_components();
        let x_prev = standard_normal(d, rng) * 2.0;
        let x = model.component_transition_mean(k, &x_prev, m) + standard_normal(d, rng);
        let z = model.sample_measurement(&x, rng);
        let g = model.component_transition_gradient(k, &x, &x_prev, m);
        e.transition_gradient = e.transition_gradient.max(finite_difference_error(
            &|y| model.component_transition_log_density(k, y, &x_prev, m),
            &g,
            &x,
            FD_STEP,
        ));
        let gl = model.component_likelihood_gradient(&z, &x, n);
        e.likelihood_gradient = e
            .likelihood_gradient
            .max(finite_difference_error(&|y| model.component_log_likelihood(&z, y, n), &gl, &x, FD_STEP));
        let jac_fd = fd_jacobian(&|y| model.component_measurement_mean(y, n), &x);
        let rinv = model.component_measurement_cov(n).to_dense().try_inverse().unwrap();
        let fisher_ref = jac_fd.transpose() * rinv * &jac_fd;
        e.fisher = e.fisher.max(matrix_error(&model.component_fisher(&x, n).to_dense(), &fisher_ref));
        let diag_fd = fd_jacobian(&|y| model.component_fisher(y, n).diagonal(), &x).diagonal();
        let diag = model.component_fisher_derivative(&x, n).unwrap_or_else(|| DVector::zeros(d));
        e.fisher_derivative = e
            .fisher_derivative
            .max(diag.iter().zip(diag_fd.iter()).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max));
        let jac = model.base_measurement_jacobian(&x).to_dense();
        e.measurement_jacobian = e.measurement_jacobian.max(matrix_error(&jac, &jac_fd));
    }
    e
}

/// Sample quantile by sorting.
pub fn ks_statistic(samples: &[f64], cdf: &dyn Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

use std::sync::Arc;

use smcmc_flow::flow::{FlowMap, FlowSchedule};
use smcmc_flow::mhmc::{MetricMode, MhmcConfig};
use smcmc_flow::smcmc::{
    joint_draw, joint_draw_gmm, joint_log_ratio, propose_c, propose_d, refine_current, refine_history, refine_history_gmm,
    shared_map_log_ratio, step_metric, ChainState, EmpiricalPosterior, GmmChainState, GmmKernelFlavor, GmmStepKernel,
    KernelFlavor, StepContext, StepKernel,
};

/// Largest disagreement between the sampler's log acceptance ratios and an
/// independent re-evaluation of every density term.
#[derive(Debug, Default, Clone, Copy)]
pub struct RatioOracle {
    /// Joint-draw events with a proposal evaluated.
    pub events: usize,
    pub max_error: f64,
    pub history_events: usize,
    pub history_max_error: f64,
    /// EDH only: simplified ratio vs. the full ratio with determinant terms.
    pub max_shared_vs_full: f64,
    /// Worst `|apply(η₀) − x|` relative error seen after any move.
    pub max_eta0_error: f64,
    /// Worst drift of cached log-densities from fresh evaluation.
    pub max_cache_error: f64,
}

fn scaled(err: f64, reference: f64) -> f64 {
    if err == 0.0 {
        0.0
    } else {
        err / reference.abs().max(1.0)
    }
}

fn det_log(map: &FlowMap) -> f64 {
    map.linear_matrix().determinant().abs().ln()
}

fn check_chain(ctx: &StepContext, chain: &ChainState, report: &mut RatioOracle) {
    let xp = ctx.history(chain.history);
    let lt = ctx.model.transition_log_density(ctx.k, &chain.x, xp);
    let ll = ctx.model.log_likelihood(ctx.z, &chain.x);
    let le = ctx.model.transition_log_density(ctx.k, &chain.eta0, xp);
    for (a, b) in [(chain.log_transition, lt), (chain.log_likelihood, ll), (chain.log_eta0, le)] {
        report.max_cache_error = report.max_cache_error.max(scaled((a - b).abs(), b));
    }
    let back = chain.map.apply(&chain.eta0);
    report.max_eta0_error = report.max_eta0_error.max((back - &chain.x).amax() / chain.x.amax().max(1.0));
}

/// Runs `events` composite iterations of the single-model sampler and checks
/// each joint-draw and history ratio against a brute-force evaluation.
pub fn single_model_ratio_oracle(
    model: &dyn StateSpaceModel,
    flavor: KernelFlavor,
    events: usize,
    seed: u64,
    check_history: bool,
) -> RatioOracle {
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let posterior = EmpiricalPosterior::from_prior(model, 40, &mut rng).unwrap();
    let x_true = model.sample_transition(1, posterior.mean(), &mut rng);
    let z = model.sample_measurement(&x_true, &mut rng);
    let ctx = StepContext { model, k: 1, z: &z, posterior: &posterior };
    let schedule = FlowSchedule::default();
    let kernel = StepKernel::prepare(flavor, &ctx, &schedule).unwrap();
    let mhmc = MhmcConfig::for_dim(model.dim_state(), 0.5, MetricMode::Constant);
    let metric = step_metric(&ctx, &mhmc).unwrap();
    let mut chain = kernel.initial_state(&ctx, &mut rng).unwrap();
    let mut report = RatioOracle::default();
    let n = posterior.len() as f64;
    while report.events < events {
        let before = chain.clone();
        let out = joint_draw(&mut chain, &ctx, &kernel, &mut rng).unwrap();
        if let Some(prop) = &out.proposal {
            let xp_new = ctx.history(prop.history);
            let xp_old = ctx.history(before.history);
            // Target: p(x|x_{k-1}) p(z|x) π̂(x_{k-1}); proposal: π̂(x_{k-1}) p(η₀|x_{k-1}) / |det C|.
            let num = model.transition_log_density(1, &prop.x, xp_new)
                + model.log_likelihood(&z, &prop.x)
                + (1.0 / n).ln()
                + det_log(&prop.map)
                + model.transition_log_density(1, &before.eta0, xp_old)
                + (1.0 / n).ln();
            let den = model.transition_log_density(1, &before.x, xp_old)
                + model.log_likelihood(&z, &before.x)
                + (1.0 / n).ln()
                + det_log(&before.map)
                + model.transition_log_density(1, &prop.eta0, xp_new)
                + (1.0 / n).ln();
            let brute = num - den;
            report.max_error = report.max_error.max(scaled((out.log_accept_ratio - brute).abs(), brute));
            if flavor != KernelFlavor::Ledh {
                assert!(Arc::ptr_eq(&prop.map, &before.map));
                let full = joint_log_ratio(&before, prop);
                let simple = shared_map_log_ratio(&before, prop);
                report.max_shared_vs_full = report.max_shared_vs_full.max(scaled((full - simple).abs(), full));
            }
            report.events += 1;
        }
        check_chain(&ctx, &chain, &mut report);
        if check_history {
            let before = chain.clone();
            let h = refine_history(&mut chain, &ctx, &kernel, &mut rng).unwrap();
            // Independent proposal from π̂: the buffer weights cancel against the proposal.
            let brute = model.transition_log_density(1, &before.x, ctx.history(h.proposed)) + (1.0 / n).ln() + (1.0 / n).ln()
                - model.transition_log_density(1, &before.x, ctx.history(before.history))
                - (1.0 / n).ln()
                - (1.0 / n).ln();
            report.history_max_error = report.history_max_error.max(scaled((h.log_accept_ratio - brute).abs(), brute));
            report.history_events += 1;
            check_chain(&ctx, &chain, &mut report);
        }
        refine_current(&mut chain, &ctx, &mhmc, metric.as_ref(), &mut rng).unwrap();
        check_chain(&ctx, &chain, &mut report);
    }
    report
}

fn check_gmm_chain(model: &GmmModel, kernel: &GmmStepKernel, chain: &GmmChainState, report: &mut RatioOracle) {
    let xp = kernel.posterior.sample(chain.history);
    let (d, c) = (chain.process_component, chain.noise_component);
    let fresh = [
        (chain.log_transition, model.component_transition_log_density(kernel.k, &chain.x, xp, d)),
        (chain.log_likelihood, model.component_log_likelihood(kernel.z, &chain.x, c)),
        (chain.log_eta0, model.component_transition_log_density(kernel.k, &chain.eta0, xp, d)),
        (chain.log_q_process, propose_d(model, kernel.k, xp, kernel.z).log_prob(d)),
        (chain.log_q_noise, propose_c(model, kernel.k, xp, d, kernel.z).log_prob(c)),
    ];
    for (a, b) in fresh {
        report.max_cache_error = report.max_cache_error.max(scaled((a - b).abs(), b));
    }
    let back = chain.map.apply(&chain.eta0);
    report.max_eta0_error = report.max_eta0_error.max((back - &chain.x).amax() / chain.x.amax().max(1.0));
}

/// Full log-target-over-proposal of a mixture-chain state, from raw inputs.
fn gmm_brute_weight(model: &GmmModel, k: usize, z: &DVector<f64>, posterior: &EmpiricalPosterior, s: &GmmChainState) -> f64 {
    let xp = posterior.sample(s.history);
    let (d, c) = (s.process_component, s.noise_component);
    let n = posterior.len() as f64;
    let target = (1.0 / n).ln()
        + model.log_process_weight(d)
        + model.log_noise_weight(c)
        + model.component_transition_log_density(k, &s.x, xp, d)
        + model.component_log_likelihood(z, &s.x, c);
    let proposal = (1.0 / n).ln()
        + propose_d(model, k, xp, z).log_prob(d)
        + propose_c(model, k, xp, d, z).log_prob(c)
        + model.component_transition_log_density(k, &s.eta0, xp, d)
        - det_log(&s.map);
    target - proposal
}

/// Mixture sampler version of [`single_model_ratio_oracle`].
pub fn gmm_ratio_oracle(model: &GmmModel, flavor: GmmKernelFlavor, events: usize, seed: u64) -> RatioOracle {
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let posterior = EmpiricalPosterior::from_prior(model, 40, &mut rng).unwrap();
    let k = 2;
    let x_true = model.sample_transition(k, posterior.mean(), &mut rng);
    let z = model.sample_measurement(&x_true, &mut rng);
    let kernel = GmmStepKernel::new(model, k, &z, &posterior, flavor, &FlowSchedule::default());
    let mut chain = kernel.initial_state(&mut rng).unwrap();
    let mut report = RatioOracle::default();
    let n = posterior.len() as f64;
    while report.events < events {
        let before = chain.clone();
        let (out, prop) = joint_draw_gmm(&mut chain, &kernel, &mut rng).unwrap();
        if let Some(prop) = prop {
            let brute = gmm_brute_weight(model, k, &z, &posterior, &prop) - gmm_brute_weight(model, k, &z, &posterior, &before);
            report.max_error = report.max_error.max(scaled((out.log_accept_ratio - brute).abs(), brute));
            report.events += 1;
        }
        check_gmm_chain(model, &kernel, &chain, &mut report);
        let before = chain.clone();
        let h = refine_history_gmm(&mut chain, &kernel, &mut rng).unwrap();
        let d = before.process_component;
        let brute = model.component_transition_log_density(k, &before.x, posterior.sample(h.proposed), d) + 2.0 * (1.0 / n).ln()
            - model.component_transition_log_density(k, &before.x, posterior.sample(before.history), d)
            - 2.0 * (1.0 / n).ln();
        report.history_max_error = report.history_max_error.max(scaled((h.log_accept_ratio - brute).abs(), brute));
        report.history_events += 1;
        check_gmm_chain(model, &kernel, &chain, &mut report);
    }
    report
}

/// Scalar linear-Gaussian model `x_k = α x_{k-1} + v`, `z = x + w`.
pub fn scalar_linear(alpha: f64, q: f64, r: f64) -> LinearGaussianModel {
    LinearGaussianModel::new(alpha, SymMat::scaled_identity(1, q), r, DVector::zeros(1), SymMat::identity(1)).unwrap()
}
