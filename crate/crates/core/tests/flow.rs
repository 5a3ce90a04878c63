use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use smcmc_flow::flow::{
    compute_flow, compute_flow_traced, flow_step_params, FlowMap, FlowMeasurement, FlowSchedule,
    LinearFlowCache, ModelMeasurement,
};
use smcmc_flow::linalg::{Jacobian, SymMat};
use smcmc_flow::model::{
    build_dispersion_matrix, grid_locations, LinearGaussianModel, PoissonCounts, SpatialSensorModel,
    StateSpaceModel,
};

/// Affine measurement with dense matrices, so the factored path is exercised.
struct DenseAffine {
    h: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl FlowMeasurement for DenseAffine {
    fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x
    }
    fn jacobian(&self, _x: &DVector<f64>) -> Jacobian {
        Jacobian::Full(self.h.clone())
    }
    fn covariance(&self, _x: &DVector<f64>) -> SymMat {
        SymMat::Full(self.r.clone())
    }
    fn is_linear(&self) -> bool {
        true
    }
}

fn spd(d: usize, seed: u64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |i, j| (((i * 7 + j * 13) as u64 + seed) % 11) as f64 / 11.0 - 0.5);
    &m * m.transpose() + DMatrix::identity(d, d) * 0.5
}

/// Plain dense Euler integration, the textbook form of the recursion.
fn dense_oracle(
    start: &DVector<f64>,
    p: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    z: &DVector<f64>,
    schedule: &FlowSchedule,
) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let d = start.len();
    let id = DMatrix::identity(d, d);
    let mut c = id.clone();
    let mut off = DVector::zeros(d);
    let mut aux = start.clone();
    let rinv = r.clone().try_inverse().unwrap();
    for (&eps, &lam) in schedule.steps().iter().zip(schedule.lambdas()) {
        let s = h * p * h.transpose() * lam + r;
        let a = -0.5 * p * h.transpose() * s.try_inverse().unwrap() * h;
        let b = (&id + 2.0 * lam * &a) * ((&id + lam * &a) * p * h.transpose() * &rinv * z + &a * start);
        aux = &aux + eps * (&a * &aux + &b);
        c = (&id + eps * &a) * c;
        off = (&id + eps * &a) * off + eps * &b;
    }
    (c, off, aux)
}

#[test]
fn factored_flow_matches_dense_recursion() {
    let d = 5;
    let p = spd(d, 3);
    let h = DMatrix::from_fn(3, d, |i, j| if i == j { 1.0 } else { 0.2 * (i + j) as f64 / 7.0 });
    let r = spd(3, 5) * 0.3;
    let z = DVector::from_vec(vec![1.0, -0.5, 2.0]);
    let start = DVector::from_fn(d, |i, _| 0.1 * i as f64);
    let schedule = FlowSchedule::default();
    let meas = DenseAffine { h: h.clone(), r: r.clone() };
    let map = compute_flow(&start, &SymMat::Full(p.clone()), &z, &meas, &schedule).unwrap();
    let (c, off, aux) = dense_oracle(&start, &p, &h, &r, &z, &schedule);
    assert!((map.linear_matrix() - &c).amax() < 1e-12);
    assert!((map.offset() - off).amax() < 1e-12);
    assert!((map.endpoint() - aux).amax() < 1e-12);
    assert!((map.log_det() - c.determinant().abs().ln()).abs() < 1e-10);
}

#[test]
fn step_params_agree_with_dense_formula() {
    let d = 3;
    let p = spd(d, 1);
    let h = DMatrix::identity(d, d) * 0.7;
    let r = DMatrix::identity(d, d) * 0.4;
    let z = DVector::from_vec(vec![0.3, 0.1, -0.2]);
    let aux = DVector::from_vec(vec![0.5, 0.0, 1.0]);
    let lam = 0.37;
    let (a, b) = flow_step_params(&aux, &aux, &SymMat::Full(p.clone()), &z, &DenseAffine { h: h.clone(), r: r.clone() }, lam).unwrap();
    let s = &h * &p * h.transpose() * lam + &r;
    let a_ref = -0.5 * &p * h.transpose() * s.try_inverse().unwrap() * &h;
    let id = DMatrix::identity(d, d);
    let b_ref = (&id + 2.0 * lam * &a_ref)
        * ((&id + lam * &a_ref) * &p * h.transpose() * r.try_inverse().unwrap() * &z + &a_ref * &aux);
    assert!((a - a_ref).amax() < 1e-13);
    assert!((b - b_ref).amax() < 1e-13);
}

#[test]
fn cache_reproduces_direct_flow() {
    let d = 4;
    let p = spd(d, 9);
    let h = DMatrix::identity(d, d);
    let r = DMatrix::identity(d, d) * 0.25;
    let z = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.0]);
    let meas = DenseAffine { h, r };
    let schedule = FlowSchedule::default();
    let cache = LinearFlowCache::new(&SymMat::Full(p.clone()), &z, &meas, &schedule).unwrap();
    for s in 0..3 {
        let start = DVector::from_fn(d, |i, _| (i as f64 - 1.5) * (s as f64 + 0.5));
        let direct = compute_flow(&start, &SymMat::Full(p.clone()), &z, &meas, &schedule).unwrap();
        let cached = cache.map_for(&start);
        assert!((direct.offset() - cached.offset()).amax() < 1e-10);
        assert!((direct.endpoint() - cached.endpoint()).amax() < 1e-10);
        assert!((direct.log_det() - cached.log_det()).abs() < 1e-12);
    }
}

#[test]
fn scalar_error_shrinks_with_more_steps() {
    let meas = DenseAffine { h: DMatrix::identity(1, 1), r: DMatrix::identity(1, 1) };
    let z = DVector::from_element(1, 2.0);
    let mut prev = f64::INFINITY;
    for n in [10, 29, 100] {
        let s = FlowSchedule::geometric(n, 1.2).unwrap();
        let map = compute_flow(&DVector::zeros(1), &SymMat::identity(1), &z, &meas, &s).unwrap();
        let err = (map.endpoint()[0] - 1.0).abs();
        assert!(err <= prev + 1e-15, "n = {n}: {err} > {prev}");
        prev = err;
    }
}

#[test]
fn uniform_fine_schedule_recovers_conjugate_posterior() {
    let meas = DenseAffine { h: DMatrix::identity(1, 1), r: DMatrix::identity(1, 1) };
    let z = DVector::from_element(1, 2.0);
    let s = FlowSchedule::geometric(2000, 1.0).unwrap();
    let map = compute_flow(&DVector::zeros(1), &SymMat::identity(1), &z, &meas, &s).unwrap();
    assert!((map.linear_matrix()[(0, 0)] - 0.5f64.sqrt()).abs() < 1e-3);
    assert!((map.endpoint()[0] - 1.0).abs() < 1e-3);
}

#[test]
fn trace_records_every_step() {
    let meas = DenseAffine { h: DMatrix::identity(2, 2), r: DMatrix::identity(2, 2) };
    let s = FlowSchedule::default();
    let map = compute_flow_traced(&DVector::zeros(2), &SymMat::identity(2), &DVector::from_element(2, 1.0), &meas, &s).unwrap();
    let t = map.trace().unwrap();
    assert_eq!(t.points.len(), 29);
    assert_eq!(t.drifts.len(), 29);
    assert_eq!(t.offsets.len(), 29);
}

#[test]
fn spatial_flow_inverts_and_stays_conditioned() {
    let model = SpatialSensorModel::on_grid(36, 0.9, 7.0, 0.3, 3.0, 0.01, 20.0, PoissonCounts { m1: 1.0, m2: 1.0 / 3.0 }).unwrap();
    let p = model.transition_covariance();
    let start = DVector::from_element(36, 0.5);
    let z = model.measurement_mean(&DVector::from_element(36, 1.0)).map(|v| v.round());
    let schedule = FlowSchedule::default();
    let mut map = compute_flow(&start, &p, &z, &ModelMeasurement(&model), &schedule).unwrap();
    let x = DVector::from_fn(36, |i, _| (i as f64 * 0.37).sin());
    let y = map.apply(&x);
    let back = map.invert(&y);
    assert!((&back - &x).amax() <= 1e-8 * x.amax().max(1.0));
    let lc = map.whitened_log_condition();
    assert!(lc <= FlowMap::schedule_condition_bound(&schedule) + 1e-8, "{lc}");
    let dense_ld = map.linear_matrix().determinant().abs().ln();
    assert!((dense_ld - map.log_det()).abs() < 1e-8);
    map.materialize();
    assert!((map.invert(&y) - &x).amax() <= 1e-8);
}

#[test]
fn dispersion_and_grid_are_consistent() {
    let locs = grid_locations(4).unwrap();
    let s = build_dispersion_matrix(&locs, 3.0, 0.01, 20.0).unwrap();
    assert!((s[(0, 0)] - 3.01).abs() < 1e-12);
}

fn linear_model(d: usize) -> LinearGaussianModel {
    LinearGaussianModel::new(0.9, SymMat::Full(spd(d, 2)), 0.25, DVector::zeros(d), SymMat::identity(d)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn apply_invert_round_trip(vals in proptest::collection::vec(-5.0f64..5.0, 6), zs in proptest::collection::vec(-3.0f64..3.0, 6)) {
        let model = linear_model(6);
        let x = DVector::from_vec(vals);
        let z = DVector::from_vec(zs);
        let map = compute_flow(&x, &model.transition_covariance(), &z, &ModelMeasurement(&model), &FlowSchedule::default()).unwrap();
        let y = map.apply(&x);
        prop_assert!((map.invert(&y) - &x).amax() <= 1e-8 * x.amax().max(1.0));
        prop_assert!((map.apply(&x) - map.endpoint()).amax() <= 1e-9 * (1.0 + x.amax()));
    }

    #[test]
    fn log_det_matches_dense_determinant(scale in 0.05f64..5.0, noise in 0.01f64..3.0) {
        let d = 4;
        let p = spd(d, 4) * scale;
        let meas = DenseAffine { h: DMatrix::identity(d, d), r: DMatrix::identity(d, d) * noise };
        let map = compute_flow(&DVector::zeros(d), &SymMat::Full(p), &DVector::from_element(d, 1.0), &meas, &FlowSchedule::default()).unwrap();
        let dense = map.linear_matrix().determinant().abs().ln();
        prop_assert!((dense - map.log_det()).abs() < 1e-9);
        prop_assert!(map.log_det() < 0.0);
    }
}
