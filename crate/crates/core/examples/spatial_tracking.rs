//! SMCMC on the skewed-t / Poisson spatial sensor model with the three
//! joint-draw proposals.
//!
//! cargo run --release --example spatial_tracking -- [dim] [particles]

use smcmc_flow::flow::FlowSchedule;
use smcmc_flow::mhmc::{MetricMode, MhmcConfig};
use smcmc_flow::model::{PoissonCounts, SpatialSensorModel, StateSpaceModel};
use smcmc_flow::rng::stream;
use smcmc_flow::smcmc::{smcmc_step, EmpiricalPosterior, KernelFlavor, SmcmcConfig};

fn main() -> smcmc_flow::Result<()> {
    let mut args = std::env::args().skip(1);
    let d: usize = args.next().map_or(36, |s| s.parse().expect("dim"));
    let n: usize = args.next().map_or(200, |s| s.parse().expect("particles"));
    let model = SpatialSensorModel::on_grid(d, 0.9, 7.0, 0.3, 3.0, 0.01, 20.0, PoissonCounts { m1: 1.0, m2: 1.0 / 3.0 })?;

    let mut truth_rng = stream(7, 0, "truth");
    let mut x = model.sample_initial(&mut truth_rng);
    let mut states = Vec::new();
    let mut obs = Vec::new();
    for k in 1..=10 {
        x = model.sample_transition(k, &x, &mut truth_rng);
        obs.push(model.sample_measurement(&x, &mut truth_rng));
        states.push(x.clone());
    }

    let cfg = SmcmcConfig {
        n_particles: n,
        n_burnin: 20,
        refine_history: true,
        refine_current: true,
        mhmc: MhmcConfig::for_dim(d, 1.5, MetricMode::Constant),
        schedule: FlowSchedule::default(),
    };
    println!("spatial model d={d}, {n} retained samples per step");
    println!("{:<7} {:>8} {:>7} {:>7} {:>7} {:>9}", "flavor", "avg_mse", "rho1", "rho2", "rho3", "time_s");
    for (label, flavor) in [("prior", KernelFlavor::Prior), ("edh", KernelFlavor::Edh), ("ledh", KernelFlavor::Ledh)] {
        let mut rng = stream(7, 0, label);
        let mut post = EmpiricalPosterior::from_prior(&model, n, &mut rng)?;
        let (mut mse, mut r1, mut r2, mut r3, mut time) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (k, (z, truth)) in obs.iter().zip(&states).enumerate() {
            let (next, stats) = smcmc_step(&post, k + 1, z, &model, flavor, &cfg, &mut rng)?;
            mse += (next.mean() - truth).norm_squared() / d as f64;
            r1 += stats.rho1();
            r2 += stats.rho2();
            r3 += stats.rho3();
            time += stats.wall_time_s;
            post = next;
        }
        let t = obs.len() as f64;
        println!("{label:<7} {:>8.4} {:>7.3} {:>7.3} {:>7.3} {:>9.3}", mse / t, r1 / t, r2 / t, r3 / t, time / t);
    }
    Ok(())
}
