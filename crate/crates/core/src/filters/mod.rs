//! Classical and flow-based baseline filters.

mod gaussian;
mod particles;

pub use gaussian::{ekf_step, kalman_step, ukf_step, GaussianBelief, SigmaPoints, UkfParams};
pub use particles::{
    bpf_step, cloud_covariance, flow_filter_step, pfpf_gmm_step, pfpf_step, pfpf_step_with, predictive_covariance, FlowFlavor,
    GmmParticleSet, ParticleStep, PriorCovariance, WeightedParticleSet,
};
