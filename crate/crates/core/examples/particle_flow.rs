//! Invertible particle-flow maps: the scalar conjugate case against its
//! closed form, then an LEDH map on the spatial model.
//!
//! cargo run --release --example particle_flow

use nalgebra::DVector;
use smcmc_flow::flow::{compute_flow, FlowSchedule, ModelMeasurement};
use smcmc_flow::linalg::SymMat;
use smcmc_flow::model::{
    build_linear_gaussian_model, standard_normal, PoissonCounts, SpatialSensorModel, StateSpaceModel,
};
use smcmc_flow::rng::stream;

fn main() -> smcmc_flow::Result<()> {
    // Prior N(0, 1), z = x + N(0, 1), z = 2: posterior N(1, 0.5).
    let scalar = build_linear_gaussian_model(1, 1.0, SymMat::identity(1), 1.0)?;
    let z = DVector::from_element(1, 2.0);
    println!("scalar conjugate flow, exact slope {:.5}, exact endpoint 1", 0.5f64.sqrt());
    for steps in [10, 29, 100, 1000] {
        let schedule = FlowSchedule::geometric(steps, if steps == 1000 { 1.0 } else { 1.2 })?;
        let map = compute_flow(&DVector::zeros(1), &SymMat::identity(1), &z, &ModelMeasurement(&scalar), &schedule)?;
        println!("  {steps:>5} steps: slope {:.5}, endpoint {:.5}", map.linear_matrix()[(0, 0)], map.endpoint()[0]);
    }

    let d = 64;
    let model = SpatialSensorModel::on_grid(d, 0.9, 7.0, 0.3, 3.0, 0.01, 20.0, PoissonCounts { m1: 1.0, m2: 1.0 / 3.0 })?;
    let mut rng = stream(3, 0, "flow");
    let truth = model.sample_transition(1, &DVector::from_element(d, 1.0), &mut rng);
    let z = model.sample_measurement(&truth, &mut rng);
    let start = model.predict_mean(1, &DVector::from_element(d, 1.0));
    let map = compute_flow(&start, &model.transition_covariance(), &z, &ModelMeasurement(&model), &FlowSchedule::default())?;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = standard_normal(d, &mut rng);
        worst = worst.max((map.invert(&map.apply(&x)) - &x).norm() / x.norm());
    }
    let dense = map.linear_matrix().determinant().abs().ln();
    println!("spatial LEDH map, d={d}");
    println!("  log|det C| {:.6} (dense determinant {dense:.6})", map.log_det());
    println!("  worst relative round-trip error over 100 states {worst:.2e}");
    println!("  distance moved by the start point {:.3}", (map.endpoint() - &start).norm());
    Ok(())
}
