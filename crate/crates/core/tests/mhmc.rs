use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use smcmc_flow::filters::{kalman_step, GaussianBelief};
use smcmc_flow::linalg::SymMat;
use smcmc_flow::mhmc::{
    generalized_leapfrog, hamiltonian, integrate, leapfrog, metric_tensor, mhmc_propose_accept,
    GmmComponentTarget, Metric, MetricMode, MetricTensor, MhmcConfig, ModelTarget, RefinementTarget,
};
use smcmc_flow::model::{
    standard_normal, GmmModel, LinearGaussianModel, PoissonCounts, SpatialSensorModel, StateSpaceModel,
};

fn gmm_target_model() -> GmmModel {
    GmmModel::benchmark(4, &[-1.0, 0.0, 1.0], 0.5, &[-3.0, 0.0, 3.0], 0.1).unwrap()
}

#[test]
fn generalized_leapfrog_is_reversible() {
    let model = gmm_target_model();
    let x_prev = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.1]);
    let truth = model.component_transition_mean(3, &x_prev, 1);
    let z = model.component_measurement_mean(&truth, 2);
    let target = GmmComponentTarget { model: &model, k: 3, x_prev: &x_prev, z: &z, process_component: 1, noise_component: 2 };
    let config = MhmcConfig { step_size: 0.02, n_leapfrog: 20, fixed_point_iters: 50, metric_mode: MetricMode::PositionDependent, step_jitter: 0.0 };
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let p0 = standard_normal(4, &mut rng);
    let x0 = &truth + standard_normal(4, &mut rng) * 0.1;
    let (x1, p1) = generalized_leapfrog(&target, &x0, &p0, &config).unwrap();
    let (x2, p2) = generalized_leapfrog(&target, &x1, &(-p1), &config).unwrap();
    assert!((&x2 - &x0).amax() < 1e-6, "{}", (&x2 - &x0).amax());
    assert!((&p2 + &p0).amax() < 1e-6);
}

#[test]
fn constant_metric_leapfrog_is_reversible() {
    let model = LinearGaussianModel::new(0.9, SymMat::scaled_identity(3, 0.5), 0.2, DVector::zeros(3), SymMat::identity(3)).unwrap();
    let xp = DVector::from_vec(vec![1.0, 0.0, -1.0]);
    let z = DVector::from_vec(vec![0.3, 0.2, 0.1]);
    let target = ModelTarget { model: &model, k: 1, x_prev: &xp, z: &z };
    let metric = metric_tensor(&target, &xp).unwrap();
    let config = MhmcConfig { step_size: 0.1, n_leapfrog: 15, fixed_point_iters: 6, metric_mode: MetricMode::Constant, step_jitter: 0.0 };
    let x0 = DVector::from_vec(vec![0.1, 0.2, 0.3]);
    let p0 = DVector::from_vec(vec![1.0, -0.5, 2.0]);
    let (x1, p1) = leapfrog(&target, &metric, &x0, &p0, &config).unwrap();
    let (x2, p2) = leapfrog(&target, &metric, &x1, &(-p1), &config).unwrap();
    assert!((&x2 - &x0).amax() < 1e-10);
    assert!((&p2 + &p0).amax() < 1e-10);
}

/// Standard Gaussian in d dimensions with identity metric.
struct StdGauss(usize);

impl RefinementTarget for StdGauss {
    fn dim(&self) -> usize {
        self.0
    }
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        -0.5 * x.norm_squared()
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        -x
    }
    fn metric(&self, _x: &DVector<f64>) -> SymMat {
        SymMat::identity(self.0)
    }
    fn metric_diag_derivative(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
}

#[test]
fn energy_error_is_second_order() {
    let target = StdGauss(5);
    let metric = MetricTensor::new(SymMat::identity(5)).unwrap();
    let x0 = DVector::from_vec(vec![1.0, -0.5, 0.2, 2.0, 0.0]);
    let p0 = DVector::from_vec(vec![0.3, 1.0, -1.2, 0.4, 0.8]);
    let h0 = hamiltonian(&target, &Metric::Fixed(&metric), &x0, &p0).unwrap();
    let err = |eps: f64| {
        let n = (1.0 / eps).round() as usize;
        let cfg = MhmcConfig { step_size: eps, n_leapfrog: n, fixed_point_iters: 6, metric_mode: MetricMode::Constant, step_jitter: 0.0 };
        let (x, p) = leapfrog(&target, &metric, &x0, &p0, &cfg).unwrap();
        (hamiltonian(&target, &Metric::Fixed(&metric), &x, &p).unwrap() - h0).abs()
    };
    let ratio = err(0.1) / err(0.05);
    assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
}

#[test]
fn zero_leapfrog_steps_rejected() {
    let cfg = MhmcConfig { step_size: 0.1, n_leapfrog: 0, fixed_point_iters: 6, metric_mode: MetricMode::Constant, step_jitter: 0.0 };
    assert!(cfg.validate().is_err());
}

#[test]
fn tiny_step_accepts_almost_surely() {
    let target = StdGauss(3);
    let metric = MetricTensor::new(SymMat::identity(3)).unwrap();
    let cfg = MhmcConfig { step_size: 1e-6, n_leapfrog: 1, fixed_point_iters: 6, metric_mode: MetricMode::Constant, step_jitter: 0.0 };
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let x = DVector::from_vec(vec![0.5, 1.0, -2.0]);
    for _ in 0..50 {
        let out = mhmc_propose_accept(&x, &target, &cfg, Metric::Fixed(&metric), &mut rng).unwrap();
        assert!(out.log_accept_ratio > -1e-9);
        assert!(out.accepted);
    }
}

/// Reference HMC with identity mass, written independently.
fn reference_hmc(x: &DVector<f64>, eps: f64, n: usize, rng: &mut ChaCha20Rng) -> (DVector<f64>, bool) {
    let d = x.len();
    let p0 = standard_normal(d, rng);
    let u: f64 = rng.random();
    let mut q = x.clone();
    let mut p = p0.clone();
    p -= &q * (0.5 * eps);
    for i in 0..n {
        q += &p * eps;
        if i + 1 < n {
            p -= &q * eps;
        }
    }
    p -= &q * (0.5 * eps);
    let h0 = 0.5 * x.norm_squared() + 0.5 * p0.norm_squared();
    let h1 = 0.5 * q.norm_squared() + 0.5 * p.norm_squared();
    if u.ln() < (h0 - h1).min(0.0) {
        (q, true)
    } else {
        (x.clone(), false)
    }
}

#[test]
fn identity_metric_matches_plain_hmc() {
    let target = StdGauss(4);
    let metric = MetricTensor::new(SymMat::identity(4)).unwrap();
    let cfg = MhmcConfig { step_size: 0.7, n_leapfrog: 5, fixed_point_iters: 6, metric_mode: MetricMode::Constant, step_jitter: 0.0 };
    let mut a = ChaCha20Rng::seed_from_u64(77);
    let mut b = ChaCha20Rng::seed_from_u64(77);
    let mut xa = DVector::from_vec(vec![2.0, -1.0, 0.0, 0.5]);
    let mut xb = xa.clone();
    for _ in 0..200 {
        let out = mhmc_propose_accept(&xa, &target, &cfg, Metric::Fixed(&metric), &mut a).unwrap();
        let (nb, acc) = reference_hmc(&xb, 0.7, 5, &mut b);
        assert_eq!(out.accepted, acc);
        assert!((&out.x - &nb).amax() < 1e-12);
        xa = out.x;
        xb = nb;
    }
}

/// Bimodal-ish 1-D target with a position-dependent metric.
struct Toy;

impl RefinementTarget for Toy {
    fn dim(&self) -> usize {
        1
    }
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        -0.5 * x[0] * x[0] - 0.1 * x[0].powi(4) + 0.3 * x[0]
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, -x[0] - 0.4 * x[0].powi(3) + 0.3)
    }
    fn metric(&self, x: &DVector<f64>) -> SymMat {
        SymMat::Diag(DVector::from_element(1, 1.0 + 0.5 * x[0] * x[0]))
    }
    fn metric_diag_derivative(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(DVector::from_element(1, x[0]))
    }
}

#[test]
fn position_dependent_chain_satisfies_detailed_balance() {
    let cfg = MhmcConfig { step_size: 0.3, n_leapfrog: 3, fixed_point_iters: 100, metric_mode: MetricMode::PositionDependent, step_jitter: 0.0 };
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let edges = [-1.2, -0.4, 0.2, 0.8, 1.6];
    let bin = |v: f64| edges.iter().filter(|e| v > **e).count();
    let nb = edges.len() + 1;
    let mut counts = DMatrix::<f64>::zeros(nb, nb);
    let mut x = DVector::from_element(1, 0.0);
    let n = 200_000;
    for _ in 0..n {
        let out = mhmc_propose_accept(&x, &Toy, &cfg, Metric::PositionDependent, &mut rng).unwrap();
        counts[(bin(x[0]), bin(out.x[0]))] += 1.0;
        x = out.x;
    }
    // stationary flows i→j and j→i must balance
    for i in 0..nb {
        for j in (i + 1)..nb {
            let (a, b) = (counts[(i, j)], counts[(j, i)]);
            let se = (a + b).sqrt().max(1.0);
            assert!((a - b).abs() <= 4.0 * se + 10.0, "bins {i},{j}: {a} vs {b}");
        }
    }
}

#[test]
fn chain_matches_kalman_posterior() {
    let d = 64;
    let a = DMatrix::from_fn(d, d, |i, j| (-((i as f64 - j as f64).powi(2)) / 20.0).exp() * 0.5);
    let q = &a * a.transpose() / d as f64 * 4.0 + DMatrix::identity(d, d) * 0.05;
    let model = LinearGaussianModel::new(0.9, SymMat::Full(q), 0.25, DVector::zeros(d), SymMat::zeros(d)).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let xp = standard_normal(d, &mut rng);
    let truth = model.sample_transition(1, &xp, &mut rng);
    let z = model.sample_measurement(&truth, &mut rng);
    let (post, _) = kalman_step(&GaussianBelief::new(xp.clone(), DMatrix::zeros(d, d)), &z, &model).unwrap();
    let target = ModelTarget { model: &model, k: 1, x_prev: &xp, z: &z };
    let metric = metric_tensor(&target, &post.mean).unwrap();
    let cfg = MhmcConfig::for_dim(d, 1.0, MetricMode::Constant);
    let mut x = post.mean.clone();
    let iters = 10_000;
    let batches = 50;
    let per = iters / batches;
    let mut batch_means = vec![DVector::<f64>::zeros(d); batches];
    let mut accepted = 0;
    for it in 0..iters {
        let out = mhmc_propose_accept(&x, &target, &cfg, Metric::Fixed(&metric), &mut rng).unwrap();
        accepted += out.accepted as usize;
        x = out.x;
        batch_means[it / per] += &x / per as f64;
    }
    let mean: DVector<f64> = batch_means.iter().fold(DVector::zeros(d), |a, b| a + b) / batches as f64;
    let mut worst: f64 = 0.0;
    for i in 0..d {
        let var = batch_means.iter().map(|b| (b[i] - mean[i]).powi(2)).sum::<f64>() / (batches - 1) as f64;
        let se = (var / batches as f64).sqrt();
        worst = worst.max((mean[i] - post.mean[i]).abs() / se);
    }
    // max over 64 coordinates of |t|: allow 4 standard errors
    assert!(worst < 4.0, "worst t = {worst}, acceptance {}", accepted as f64 / iters as f64);
}

#[test]
fn poisson_fisher_at_origin() {
    let model = SpatialSensorModel::on_grid(9, 0.9, 7.0, 0.3, 3.0, 0.01, 20.0, PoissonCounts { m1: 1.0, m2: 1.0 / 3.0 }).unwrap();
    let f = model.likelihood_fisher(&DVector::zeros(9));
    for v in f.diagonal().iter() {
        assert!((v - 1.0 / 9.0).abs() < 1e-15);
    }
    let xp = DVector::zeros(9);
    let z = DVector::from_element(9, 1.0);
    let target = ModelTarget { model: &model, k: 1, x_prev: &xp, z: &z };
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for _ in 0..100 {
        let x = standard_normal(9, &mut rng) * 3.0;
        let g = metric_tensor(&target, &x).unwrap();
        assert!(g.matrix().to_dense().symmetric_eigenvalues().min() > 0.0);
    }
}

#[test]
fn integrator_reaches_same_state_through_dispatch() {
    let model = gmm_target_model();
    let xp = DVector::from_element(4, 0.2);
    let z = DVector::from_element(4, 0.5);
    let target = GmmComponentTarget { model: &model, k: 1, x_prev: &xp, z: &z, process_component: 0, noise_component: 1 };
    let cfg = MhmcConfig { step_size: 0.05, n_leapfrog: 4, fixed_point_iters: 30, metric_mode: MetricMode::PositionDependent, step_jitter: 0.0 };
    let p = DVector::from_element(4, 0.5);
    let a = integrate(&target, &Metric::PositionDependent, &xp, &p, &cfg).unwrap();
    let b = generalized_leapfrog(&target, &xp, &p, &cfg).unwrap();
    assert_eq!(a, b);
}
