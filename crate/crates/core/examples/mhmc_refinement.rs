//! Manifold HMC refinement moves on a spatial-model posterior: acceptance
//! against step size for the constant and position-dependent metrics.
//!
//! cargo run --release --example mhmc_refinement

use nalgebra::DVector;
use smcmc_flow::mhmc::{metric_tensor, mhmc_propose_accept, Metric, MetricMode, MhmcConfig, ModelTarget};
use smcmc_flow::model::{GmmModel, PoissonCounts, SpatialSensorModel, StateSpaceModel};
use smcmc_flow::mhmc::GmmComponentTarget;
use smcmc_flow::rng::stream;

fn main() -> smcmc_flow::Result<()> {
    let d = 36;
    let model = SpatialSensorModel::on_grid(d, 0.9, 7.0, 0.3, 3.0, 0.01, 20.0, PoissonCounts { m1: 1.0, m2: 1.0 / 3.0 })?;
    let mut rng = stream(2, 0, "mhmc");
    let x_prev = DVector::from_element(d, 1.0);
    let truth = model.sample_transition(1, &x_prev, &mut rng);
    let z = model.sample_measurement(&truth, &mut rng);
    let target = ModelTarget { model: &model, k: 1, x_prev: &x_prev, z: &z };
    let metric = metric_tensor(&target, &truth)?;

    println!("spatial posterior d={d}, constant metric, 200 moves per step size");
    for scale in [0.25, 0.5, 1.0, 2.0] {
        let cfg = MhmcConfig::for_dim(d, scale, MetricMode::Constant);
        let mut x = truth.clone();
        let mut accepted = 0;
        for _ in 0..200 {
            let out = mhmc_propose_accept(&x, &target, &cfg, Metric::Fixed(&metric), &mut rng)?;
            accepted += out.accepted as usize;
            x = out.x;
        }
        println!("  step {:.4}: acceptance {:.2}", cfg.step_size, accepted as f64 / 200.0);
    }

    let gd = 16;
    let gmm = GmmModel::benchmark(gd, &[-1.0, 0.0, 1.0], 0.5, &[-3.0, 0.0, 3.0], 0.1)?;
    let g_prev = DVector::from_element(gd, 0.5);
    let centre = gmm.component_transition_mean(2, &g_prev, 1);
    let gz = gmm.component_measurement_mean(&centre, 2);
    let g_target = GmmComponentTarget { model: &gmm, k: 2, x_prev: &g_prev, z: &gz, process_component: 1, noise_component: 2 };
    println!("GMM component posterior d={gd}, position-dependent metric");
    for scale in [0.5, 1.0, 1.75, 3.0] {
        let cfg = MhmcConfig::for_dim(gd, scale, MetricMode::PositionDependent);
        let mut x = centre.clone();
        let mut accepted = 0;
        for _ in 0..200 {
            let out = mhmc_propose_accept(&x, &g_target, &cfg, Metric::PositionDependent, &mut rng)?;
            accepted += out.accepted as usize;
            x = out.x;
        }
        println!("  step {:.4}: acceptance {:.2}", cfg.step_size, accepted as f64 / 200.0);
    }
    Ok(())
}
