//! SMCMC for the Gaussian-mixture noise model: latent component proposals
//! with and without the component-conditioned LEDH flow, and the PF-PF
//! mixture baseline.
//!
//! cargo run --release --example gmm_tracking -- [dim]

use smcmc_flow::filters::{pfpf_gmm_step, GmmParticleSet};
use smcmc_flow::flow::FlowSchedule;
use smcmc_flow::mhmc::{MetricMode, MhmcConfig};
use smcmc_flow::model::{GmmModel, StateSpaceModel};
use smcmc_flow::rng::stream;
use smcmc_flow::smcmc::{smcmc_gmm_step, EmpiricalPosterior, GmmKernelFlavor, SmcmcConfig};

fn main() -> smcmc_flow::Result<()> {
    let d: usize = std::env::args().nth(1).map_or(16, |s| s.parse().expect("dim"));
    let model = GmmModel::benchmark(d, &[-1.0, 0.0, 1.0], 0.5, &[-3.0, 0.0, 3.0], 0.1)?;
    let steps = 20;
    let mut rng = stream(9, 0, "truth");
    let mut x = model.sample_initial(&mut rng);
    let mut states = Vec::new();
    let mut obs = Vec::new();
    for k in 1..=steps {
        x = model.sample_transition(k, &x, &mut rng);
        obs.push(model.sample_measurement(&x, &mut rng));
        states.push(x.clone());
    }

    let mut mhmc = MhmcConfig::for_dim(d, 1.75, MetricMode::PositionDependent);
    mhmc.step_jitter = 0.9;
    let cfg = SmcmcConfig { n_particles: 100, n_burnin: 20, refine_history: true, refine_current: true, mhmc, schedule: FlowSchedule::default() };
    println!("GMM noise model d={d}, {steps} steps");
    for (label, flavor) in [("smcmc-gmm-ledh", GmmKernelFlavor::Ledh), ("smcmc-gmm", GmmKernelFlavor::Prior)] {
        let mut rng = stream(9, 0, label);
        let mut post = EmpiricalPosterior::from_prior(&model, cfg.n_particles, &mut rng)?;
        let (mut mse, mut r1, mut r3) = (0.0, 0.0, 0.0);
        for (k, z) in obs.iter().enumerate() {
            let (next, stats) = smcmc_gmm_step(&post, k + 1, z, &model, flavor, &cfg, &mut rng)?;
            mse += (next.mean() - &states[k]).norm_squared() / d as f64;
            r1 += stats.rho1();
            r3 += stats.rho3();
            post = next;
        }
        let t = steps as f64;
        println!("  {label:<15} mse {:.4}  rho1 {:.3}  rho3 {:.3}", mse / t, r1 / t, r3 / t);
    }

    let mut rng = stream(9, 0, "pfpf-gmm");
    let mut set = GmmParticleSet::from_prior(&model, 200, &mut rng);
    let mut mse = 0.0;
    for (k, z) in obs.iter().enumerate() {
        let step = pfpf_gmm_step(&mut set, k + 1, z, &model, &FlowSchedule::default(), &mut rng)?;
        mse += (step.estimate - &states[k]).norm_squared() / d as f64;
    }
    println!("  {:<15} mse {:.4}", "pfpf-gmm", mse / steps as f64);
    Ok(())
}
