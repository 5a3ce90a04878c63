//! Baseline filters on a linear-Gaussian model with the Kalman filter as
//! ground truth.
//!
//! cargo run --release --example kalman_baselines

use smcmc_flow::filters::{
    bpf_step, ekf_step, flow_filter_step, kalman_step, pfpf_step, ukf_step, FlowFlavor, GaussianBelief, UkfParams,
    WeightedParticleSet,
};
use smcmc_flow::flow::FlowSchedule;
use smcmc_flow::linalg::SymMat;
use smcmc_flow::model::{build_dispersion_matrix, build_linear_gaussian_model, grid_locations, StateSpaceModel};
use smcmc_flow::rng::stream;

fn main() -> smcmc_flow::Result<()> {
    let d = 16;
    let sigma = build_dispersion_matrix(&grid_locations(d)?, 3.0, 0.01, 20.0)?;
    let model = build_linear_gaussian_model(d, 0.9, SymMat::Full(sigma), 0.5)?;
    let steps = 10;

    let mut rng = stream(11, 0, "truth");
    let mut x = model.sample_initial(&mut rng);
    let mut states = Vec::new();
    let mut obs = Vec::new();
    for k in 1..=steps {
        x = model.sample_transition(k, &x, &mut rng);
        obs.push(model.sample_measurement(&x, &mut rng));
        states.push(x.clone());
    }
    let mse = |est: &nalgebra::DVector<f64>, k: usize| (est - &states[k]).norm_squared() / d as f64;

    let (mut kf, mut ekf, mut ukf) = (GaussianBelief::from_model_prior(&model), GaussianBelief::from_model_prior(&model), GaussianBelief::from_model_prior(&model));
    let mut totals = [0.0; 3];
    for (k, z) in obs.iter().enumerate() {
        kf = kalman_step(&kf, z, &model)?.0;
        ekf = ekf_step(&ekf, k + 1, z, &model)?;
        ukf = ukf_step(&ukf, k + 1, z, &model, UkfParams::default())?;
        totals[0] += mse(&kf.mean, k);
        totals[1] += mse(&ekf.mean, k);
        totals[2] += mse(&ukf.mean, k);
    }
    let t = steps as f64;
    println!("linear Gaussian d={d}, {steps} steps, average MSE against the truth");
    for (name, v) in ["kf", "ekf", "ukf"].iter().zip(totals) {
        println!("  {name:<12} {:.4}", v / t);
    }

    let schedule = FlowSchedule::default();
    for (name, n) in [("bpf", 1000), ("pfpf-edh", 200), ("pfpf-ledh", 200), ("edh", 200)] {
        let mut rng = stream(11, 0, name);
        let mut set = WeightedParticleSet::from_prior(&model, n, &mut rng);
        let (mut total, mut ess) = (0.0, 0.0);
        for (k, z) in obs.iter().enumerate() {
            let step = match name {
                "bpf" => bpf_step(&mut set, k + 1, z, &model, &mut rng)?,
                "pfpf-edh" => pfpf_step(&mut set, k + 1, z, &model, FlowFlavor::Edh, &schedule, &mut rng)?,
                "pfpf-ledh" => pfpf_step(&mut set, k + 1, z, &model, FlowFlavor::Ledh, &schedule, &mut rng)?,
                _ => flow_filter_step(&mut set, k + 1, z, &model, FlowFlavor::Edh, &schedule, &mut rng)?,
            };
            total += mse(&step.estimate, k);
            ess += step.ess;
        }
        println!("  {:<12} {:.4}   (N={n}, mean ESS {:.0})", format!("{name}"), total / t, ess / t);
    }
    Ok(())
}
