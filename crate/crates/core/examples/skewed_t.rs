//! The generalized-hyperbolic skewed-t transition: sample moments against
//! the closed-form mean and covariance, and the density along one axis.
//!
//! cargo run --release --example skewed_t

use nalgebra::{DMatrix, DVector};
use smcmc_flow::model::{build_dispersion_matrix, grid_locations, GhSkewT, GhSkewTParams};
use smcmc_flow::rng::stream;

fn main() -> smcmc_flow::Result<()> {
    let d = 4;
    let locations = grid_locations(d)?;
    let sigma = build_dispersion_matrix(&locations, 3.0, 0.01, 20.0)?;
    let dist = GhSkewT::new(GhSkewTParams { alpha: 0.9, gamma: DVector::from_element(d, 0.3), nu: 7.0, sigma, locations })?;
    let x_prev = DVector::from_element(d, 1.0);

    let n = 200_000;
    let mut rng = stream(1, 0, "skewt");
    let draws: Vec<DVector<f64>> = (0..n).map(|_| dist.sample(&x_prev, &mut rng)).collect();
    let mean = draws.iter().fold(DVector::zeros(d), |acc, x| acc + x) / n as f64;
    let cov = draws.iter().fold(DMatrix::zeros(d, d), |acc, x| {
        let c = x - &mean;
        acc + &c * c.transpose()
    }) / (n - 1) as f64;

    println!("GH skewed-t, d={d}, nu=7, gamma=0.3, {n} draws");
    let row = |v: &DVector<f64>| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    println!("  sample mean   {}", row(&mean));
    println!("  exact mean    {}", row(&dist.mean(&x_prev)));
    println!("  covariance max abs error {:.4}", (cov - dist.covariance().to_dense()).amax());

    println!("  log density along the first coordinate:");
    for t in [-4.0, -2.0, 0.0, 2.0, 4.0, 8.0] {
        let mut x = dist.mean(&x_prev);
        x[0] += t;
        println!("    offset {t:>5.1}: {:.4}", dist.log_density(&x, &x_prev));
    }
    Ok(())
}
