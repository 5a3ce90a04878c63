//! Marginal-likelihood estimates from the SMCMC proposal weights, compared
//! with the exact Kalman-filter evidence.
//!
//! cargo run --release --example evidence

use smcmc_flow::evidence::{kf_log_evidence, relative_logz_mse, EvidenceLedger};
use smcmc_flow::flow::FlowSchedule;
use smcmc_flow::linalg::SymMat;
use smcmc_flow::mhmc::{MetricMode, MhmcConfig};
use smcmc_flow::model::{build_dispersion_matrix, build_linear_gaussian_model, grid_locations, StateSpaceModel};
use smcmc_flow::rng::stream;
use smcmc_flow::smcmc::{smcmc_step, EmpiricalPosterior, KernelFlavor, SmcmcConfig};

fn main() -> smcmc_flow::Result<()> {
    let d = 16;
    let sigma = build_dispersion_matrix(&grid_locations(d)?, 3.0, 0.01, 20.0)?;
    let model = build_linear_gaussian_model(d, 0.9, SymMat::Full(sigma), 0.5)?;
    let mut rng = stream(5, 0, "truth");
    let mut x = model.sample_initial(&mut rng);
    let mut obs = Vec::new();
    for k in 1..=10 {
        x = model.sample_transition(k, &x, &mut rng);
        obs.push(model.sample_measurement(&x, &mut rng));
    }
    let truth = kf_log_evidence(&model, &obs)?;
    let truth_cum = smcmc_flow::evidence::cumulative_sum(&truth);

    let cfg = SmcmcConfig {
        n_particles: 500,
        n_burnin: 20,
        refine_history: true,
        refine_current: true,
        mhmc: MhmcConfig::for_dim(d, 0.5, MetricMode::Constant),
        schedule: FlowSchedule::default(),
    };
    println!("linear Gaussian d={d}: cumulative log Z per step");
    println!("{:>4} {:>12} {:>12} {:>12}", "step", "kalman", "smcmc-edh", "smcmc-prior");
    let mut ledgers = Vec::new();
    for (label, flavor) in [("edh", KernelFlavor::Edh), ("prior", KernelFlavor::Prior)] {
        let mut rng = stream(5, 0, label);
        let mut post = EmpiricalPosterior::from_prior(&model, cfg.n_particles, &mut rng)?;
        let mut ledger = EvidenceLedger::new();
        for (k, z) in obs.iter().enumerate() {
            let (next, stats) = smcmc_step(&post, k + 1, z, &model, flavor, &cfg, &mut rng)?;
            ledger.push_weights(&stats.log_weights)?;
            post = next;
        }
        ledgers.push(ledger);
    }
    for k in 0..obs.len() {
        println!("{:>4} {:>12.3} {:>12.3} {:>12.3}", k + 1, truth_cum[k], ledgers[0].cumulative()[k], ledgers[1].cumulative()[k]);
    }
    for (label, ledger) in ["edh", "prior"].iter().zip(&ledgers) {
        println!("relative log-Z error, {label}: {:.2e}", relative_logz_mse(ledger.cumulative(), &truth_cum)?);
    }
    Ok(())
}
