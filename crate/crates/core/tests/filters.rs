use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use smcmc_flow::filters::{
    bpf_step, ekf_step, kalman_step, pfpf_gmm_step, pfpf_step, ukf_step, FlowFlavor, GaussianBelief,
    GmmParticleSet, SigmaPoints, UkfParams, WeightedParticleSet,
};
use smcmc_flow::flow::FlowSchedule;
use smcmc_flow::linalg::{Jacobian, SymMat};
use smcmc_flow::model::{
    DynamicMap, GmmModel, GmmNoiseSpec, LinearGaussianModel, MeasurementMap, StateSpaceModel,
};

fn scalar_model(alpha: f64, q: f64, r: f64) -> LinearGaussianModel {
    LinearGaussianModel::new(alpha, SymMat::scaled_identity(1, q), r, DVector::zeros(1), SymMat::identity(1)).unwrap()
}

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

#[test]
fn kalman_conjugate_update() {
    let model = scalar_model(1.0, 0.0, 1.0);
    let belief = GaussianBelief::new(v1(0.0), DMatrix::identity(1, 1));
    let (post, inc) = kalman_step(&belief, &v1(2.0), &model).unwrap();
    assert!((post.mean[0] - 1.0).abs() < 1e-14);
    assert!((post.cov[(0, 0)] - 0.5).abs() < 1e-14);
    assert!((inc + 2.265512).abs() < 1e-6, "{inc}");
}

#[test]
fn kalman_zero_innovation_keeps_mean() {
    let model = scalar_model(0.5, 0.3, 0.2);
    let belief = GaussianBelief::new(v1(2.0), DMatrix::identity(1, 1));
    let (post, _) = kalman_step(&belief, &v1(1.0), &model).unwrap();
    assert!((post.mean[0] - 1.0).abs() < 1e-14);
}

fn multivariate_linear(d: usize) -> LinearGaussianModel {
    let a = DMatrix::from_fn(d, d, |i, j| ((i * 5 + j * 3) % 7) as f64 / 7.0 - 0.4);
    let q = &a * a.transpose() + DMatrix::identity(d, d) * 0.3;
    LinearGaussianModel::new(0.9, SymMat::Full(q), 0.25, DVector::zeros(d), SymMat::identity(d)).unwrap()
}

#[test]
fn ekf_and_ukf_reduce_to_kalman_on_linear_models() {
    let d = 4;
    let model = multivariate_linear(d);
    let mut kf = GaussianBelief::from_model_prior(&model);
    let mut ekf = kf.clone();
    let mut ukf = kf.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut x = model.sample_initial(&mut rng);
    for k in 1..=5 {
        x = model.sample_transition(k, &x, &mut rng);
        let z = model.sample_measurement(&x, &mut rng);
        kf = kalman_step(&kf, &z, &model).unwrap().0;
        ekf = ekf_step(&ekf, k, &z, &model).unwrap();
        ukf = ukf_step(&ukf, k, &z, &model, UkfParams::default()).unwrap();
        assert!((&kf.mean - &ekf.mean).amax() < 1e-10);
        assert!((&kf.cov - &ekf.cov).amax() < 1e-10);
        assert!((&kf.mean - &ukf.mean).amax() < 1e-8);
        assert!((&kf.cov - &ukf.cov).amax() < 1e-8);
    }
}

#[test]
fn unscented_quadratic_moments_are_exact() {
    let (mu, var) = (1.3, 0.49);
    let sp = SigmaPoints::new(&v1(mu), &DMatrix::from_element(1, 1, var), UkfParams::default()).unwrap();
    assert!((sp.mean_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let (m, _, _) = sp.transform(&|x| x.map(|v| v * v / 20.0));
    assert!((m[0] - (mu * mu + var) / 20.0).abs() < 1e-9);
}

#[test]
fn ess_uniform_likelihood_and_bounds() {
    let model = LinearGaussianModel::new(1.0, SymMat::scaled_identity(1, 1.0), 1e12, DVector::zeros(1), SymMat::identity(1)).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut set = WeightedParticleSet::from_prior(&model, 100, &mut rng);
    let out = bpf_step(&mut set, 1, &v1(0.0), &model, &mut rng).unwrap();
    assert!((out.ess - 100.0).abs() < 1e-6);
    assert!(!out.resampled);
}

#[test]
fn bpf_evidence_matches_kalman() {
    let model = scalar_model(0.9, 0.5, 0.3);
    let z = v1(0.8);
    let (_, exact) = kalman_step(&GaussianBelief::from_model_prior(&model), &z, &model).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let mut set = WeightedParticleSet::from_prior(&model, 100_000, &mut rng);
    let out = bpf_step(&mut set, 1, &z, &model, &mut rng).unwrap();
    let est = out.log_evidence_increment.unwrap();
    assert!((est - exact).abs() < 0.01, "{est} vs {exact}");
}

#[test]
fn pfpf_evidence_unbiased_on_scalar_model() {
    let model = scalar_model(0.9, 0.5, 0.3);
    let z = v1(1.4);
    let (_, exact) = kalman_step(&GaussianBelief::from_model_prior(&model), &z, &model).unwrap();
    let runs = 200;
    let mut vals = Vec::with_capacity(runs);
    for r in 0..runs {
        let mut rng = ChaCha20Rng::seed_from_u64(100 + r as u64);
        let mut set = WeightedParticleSet::from_prior(&model, 50, &mut rng);
        let out = pfpf_step(&mut set, 1, &z, &model, FlowFlavor::Ledh, &FlowSchedule::default(), &mut rng).unwrap();
        vals.push(out.log_evidence_increment.unwrap().exp());
    }
    let mean = vals.iter().sum::<f64>() / runs as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt();
    let se = sd / (runs as f64).sqrt();
    assert!((mean - exact.exp()).abs() <= 3.0 * se + 1e-12, "{mean} vs {}", exact.exp());
}

/// Scalar random walk whose measurement ignores the state.
struct Blind(LinearGaussianModel);

impl StateSpaceModel for Blind {
    fn dim_state(&self) -> usize {
        1
    }
    fn dim_obs(&self) -> usize {
        1
    }
    fn predict_mean(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        self.0.predict_mean(k, x)
    }
    fn transition_jacobian(&self, k: usize, x: &DVector<f64>) -> DMatrix<f64> {
        self.0.transition_jacobian(k, x)
    }
    fn transition_log_density(&self, k: usize, x: &DVector<f64>, xp: &DVector<f64>) -> f64 {
        self.0.transition_log_density(k, x, xp)
    }
    fn transition_log_density_gradient(&self, k: usize, x: &DVector<f64>, xp: &DVector<f64>) -> DVector<f64> {
        self.0.transition_log_density_gradient(k, x, xp)
    }
    fn sample_transition(&self, k: usize, xp: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        self.0.sample_transition(k, xp, rng)
    }
    fn transition_covariance(&self) -> SymMat {
        self.0.transition_covariance()
    }
    fn prior_precision(&self) -> SymMat {
        self.0.prior_precision()
    }
    fn measurement_mean(&self, _x: &DVector<f64>) -> DVector<f64> {
        v1(0.0)
    }
    fn measurement_jacobian(&self, _x: &DVector<f64>) -> Jacobian {
        Jacobian::Diag(v1(0.0))
    }
    fn measurement_covariance(&self, _x: &DVector<f64>) -> SymMat {
        SymMat::identity(1)
    }
    fn log_likelihood(&self, z: &DVector<f64>, x: &DVector<f64>) -> f64 {
        -0.5 * (z[0] - 0.1 * x[0]).powi(2)
    }
    fn log_likelihood_gradient(&self, z: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        v1(0.1 * (z[0] - 0.1 * x[0]))
    }
    fn sample_measurement(&self, _x: &DVector<f64>, _rng: &mut dyn RngCore) -> DVector<f64> {
        v1(0.0)
    }
    fn likelihood_fisher(&self, _x: &DVector<f64>) -> SymMat {
        SymMat::zeros(1)
    }
    fn initial_mean(&self) -> DVector<f64> {
        self.0.initial_mean()
    }
    fn initial_covariance(&self) -> SymMat {
        self.0.initial_covariance()
    }
    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        self.0.sample_initial(rng)
    }
}

#[test]
fn identity_flow_reduces_to_bootstrap_weights() {
    let model = Blind(scalar_model(0.9, 0.5, 1.0));
    for flavor in [FlowFlavor::Edh, FlowFlavor::Ledh] {
        let mut rng_a = ChaCha20Rng::seed_from_u64(5);
        let mut rng_b = ChaCha20Rng::seed_from_u64(5);
        let mut a = WeightedParticleSet::from_prior(&model, 64, &mut rng_a);
        let mut b = WeightedParticleSet::from_prior(&model, 64, &mut rng_b);
        let oa = bpf_step(&mut a, 1, &v1(0.7), &model, &mut rng_a).unwrap();
        let ob = pfpf_step(&mut b, 1, &v1(0.7), &model, flavor, &FlowSchedule::default(), &mut rng_b).unwrap();
        assert_eq!(a.particles, b.particles);
        for (x, y) in a.log_weights.iter().zip(&b.log_weights) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((oa.log_evidence_increment.unwrap() - ob.log_evidence_increment.unwrap()).abs() < 1e-12);
    }
}

#[test]
fn systematic_resampling_preserves_mean_in_expectation() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let particles: Vec<DVector<f64>> = (0..50).map(|i| v1(i as f64)).collect();
    let mut set = WeightedParticleSet::uniform(particles);
    let inc: Vec<f64> = (0..50).map(|i| -0.01 * (i as f64 - 20.0).powi(2)).collect();
    set.reweight(&inc).unwrap();
    let target = set.weighted_mean()[0];
    let reps = 2000;
    let mut acc = 0.0;
    for _ in 0..reps {
        let mut s = set.clone();
        s.resample(&mut rng);
        acc += s.weighted_mean()[0];
    }
    assert!((acc / reps as f64 - target).abs() < 0.05);
}

#[test]
fn gmm_labels_follow_prior_weights() {
    let spec = GmmNoiseSpec {
        weights: vec![0.2, 0.5, 0.3],
        offsets: vec![v1(-1.0), v1(0.0), v1(1.0)],
        covs: vec![SymMat::identity(1); 3],
    };
    let noise = GmmNoiseSpec::isotropic(1, &[0.0, 2.0], 0.5);
    let model = GmmModel::new(DynamicMap::Linear { alpha: 0.5 }, MeasurementMap::Identity, spec, noise, DVector::zeros(1), SymMat::identity(1)).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let n = 100_000;
    let mut gs = GmmParticleSet::from_prior(&model, n, &mut rng);
    let schedule = FlowSchedule::geometric(5, 1.2).unwrap();
    pfpf_gmm_step(&mut gs, 1, &v1(0.3), &model, &schedule, &mut rng).unwrap();
    // label counts are taken from a fresh draw without resampling distortion
    let mut gs = GmmParticleSet::from_prior(&model, n, &mut rng);
    let flat = FlowSchedule::geometric(1, 1.0).unwrap();
    let noisy = GmmModel::new(
        DynamicMap::Linear { alpha: 0.5 },
        MeasurementMap::Identity,
        GmmNoiseSpec {
            weights: vec![0.2, 0.5, 0.3],
            offsets: vec![v1(-1.0), v1(0.0), v1(1.0)],
            covs: vec![SymMat::identity(1); 3],
        },
        GmmNoiseSpec::isotropic(1, &[0.0, 2.0], 1e6),
        DVector::zeros(1),
        SymMat::identity(1),
    )
    .unwrap();
    let mut labels = vec![0usize; 3];
    let out = pfpf_gmm_step(&mut gs, 1, &v1(0.0), &noisy, &flat, &mut rng).unwrap();
    assert!(!out.resampled);
    for &m in &gs.process_labels {
        labels[m] += 1;
    }
    for (m, w) in [0.2, 0.5, 0.3].iter().enumerate() {
        let f = labels[m] as f64 / n as f64;
        let se = (w * (1.0 - w) / n as f64).sqrt();
        assert!((f - w).abs() < 3.0 * se, "component {m}: {f} vs {w}");
    }
}

#[test]
fn single_component_gmm_matches_ledh_pfpf() {
    let spec = GmmNoiseSpec::isotropic(2, &[0.0], 0.7);
    let noise = GmmNoiseSpec::isotropic(2, &[0.0], 0.5);
    let model = GmmModel::new(DynamicMap::Linear { alpha: 0.8 }, MeasurementMap::Identity, spec, noise, DVector::zeros(2), SymMat::identity(2)).unwrap();
    let z = DVector::from_vec(vec![0.4, -1.0]);
    let mut rng_a = ChaCha20Rng::seed_from_u64(21);
    let mut rng_b = ChaCha20Rng::seed_from_u64(21);
    let mut gs = GmmParticleSet::from_prior(&model, 30, &mut rng_a);
    let mut set = WeightedParticleSet::from_prior(&model, 30, &mut rng_b);
    let og = pfpf_gmm_step(&mut gs, 1, &z, &model, &FlowSchedule::default(), &mut rng_a).unwrap();
    let op = pfpf_step(&mut set, 1, &z, &model, FlowFlavor::Ledh, &FlowSchedule::default(), &mut rng_b).unwrap();
    for (a, b) in gs.set.particles.iter().zip(&set.particles) {
        assert!((a - b).amax() < 1e-9);
    }
    for (a, b) in gs.set.log_weights.iter().zip(&set.log_weights) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!((og.ess - op.ess).abs() < 1e-8);
}
