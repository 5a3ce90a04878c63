//! Data generation and trial execution.

use std::time::Instant;

use nalgebra::DVector;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{BuiltModel, ExperimentConfig, FilterKind, FilterSpec, PfpfCovariance, TruthStart};
use crate::error::{Error, Result};
use crate::evidence::{evidence_increment, kf_log_evidence, cumulative_sum};
use crate::filters::{
    bpf_step, ekf_step, flow_filter_step, kalman_step, pfpf_gmm_step, pfpf_step_with, ukf_step, FlowFlavor, GaussianBelief,
    GmmParticleSet, PriorCovariance, UkfParams, WeightedParticleSet,
};
use crate::flow::FlowSchedule;
use crate::model::StateSpaceModel;
use crate::rng::stream;
use crate::smcmc::{smcmc_gmm_step, smcmc_step, EmpiricalPosterior, GmmKernelFlavor, KernelFlavor, SmcmcConfig};

/// Ground truth `x_0..x_T` and measurements `z_1..z_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub trial: usize,
    pub seed: u64,
    /// `states[0]` is `x_0`.
    pub states: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// `x_k` for `k` in `0..=T`.
    pub fn state(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.states[k])
    }

    /// `z_k` for `k` in `1..=T`.
    pub fn observation(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.observations[k - 1])
    }

    pub fn observation_vectors(&self) -> Vec<DVector<f64>> {
        self.observations.iter().map(|z| DVector::from_column_slice(z)).collect()
    }
}

/// Simulates `T` steps of the model from `x0`.
pub fn generate_trajectory(
    model: &dyn StateSpaceModel,
    x0: DVector<f64>,
    time_steps: usize,
    rng: &mut dyn RngCore,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    if time_steps == 0 {
        return Err(Error::Input("trajectory needs at least one step".into()));
    }
    let mut states = Vec::with_capacity(time_steps + 1);
    let mut obs = Vec::with_capacity(time_steps);
    states.push(x0);
    for k in 1..=time_steps {
        let x = model.sample_transition(k, &states[k - 1], rng);
        obs.push(model.sample_measurement(&x, rng));
        states.push(x);
    }
    Ok((states, obs))
}

/// Trial data drawn from the `(seed, trial, "data")` stream.
pub fn trial_trajectory(cfg: &ExperimentConfig, model: &dyn StateSpaceModel, trial: usize) -> Result<Trajectory> {
    let mut rng = stream(cfg.seed, trial as u64, "data");
    let x0 = match cfg.truth_start {
        TruthStart::Zero => DVector::zeros(model.dim_state()),
        TruthStart::Prior => model.sample_initial(&mut rng),
    };
    let (states, obs) = generate_trajectory(model, x0, cfg.time_steps, &mut rng)?;
    Ok(Trajectory {
        trial,
        seed: cfg.seed,
        states: states.iter().map(|x| x.as_slice().to_vec()).collect(),
        observations: obs.iter().map(|z| z.as_slice().to_vec()).collect(),
    })
}

/// One (trial, step, filter) record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub trial: usize,
    pub step: usize,
    pub filter: String,
    pub n_particles: Option<usize>,
    /// `‖x̂_k − x_k‖²`, summed over components.
    pub sq_error: f64,
    pub rho1: Option<f64>,
    pub rho2: Option<f64>,
    pub rho3: Option<f64>,
    pub ess: Option<f64>,
    pub log_increment: Option<f64>,
    pub cum_log_z: Option<f64>,
    /// Exact cumulative log-evidence when the model admits it.
    pub true_cum_log_z: Option<f64>,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<Vec<f64>>,
}

/// A filter failure inside one trial; the trial counts as lost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub trial: usize,
    pub filter: String,
    pub step: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterRun {
    pub trial: usize,
    pub filter: FilterSpec,
    pub steps: Vec<StepRecord>,
    pub failure: Option<FailureRecord>,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub roster: Vec<FilterSpec>,
    pub trajectories: Vec<Trajectory>,
    /// Trial-major, roster order within a trial.
    pub runs: Vec<FilterRun>,
}

impl RunReport {
    pub fn runs_for(&self, filter: &FilterSpec) -> impl Iterator<Item = &FilterRun> {
        let f = *filter;
        self.runs.iter().filter(move |r| r.filter == f)
    }
}

struct StepOutput {
    estimate: DVector<f64>,
    rhos: Option<[f64; 3]>,
    ess: Option<f64>,
    log_increment: Option<f64>,
}

enum FilterState {
    Gaussian(GaussianBelief),
    Particles(WeightedParticleSet, PriorCovariance),
    Gmm(GmmParticleSet),
    Chain(EmpiricalPosterior, SmcmcConfig),
}

struct FilterRunner<'a> {
    spec: FilterSpec,
    model: &'a BuiltModel,
    schedule: FlowSchedule,
    include_burnin: bool,
    state: FilterState,
}

impl<'a> FilterRunner<'a> {
    fn new(spec: FilterSpec, cfg: &ExperimentConfig, model: &'a BuiltModel, rng: &mut dyn RngCore) -> Result<Self> {
        let m = model.as_dyn();
        let n = spec.particles();
        let state = match spec.kind {
            FilterKind::Kf | FilterKind::Ekf | FilterKind::Ukf => FilterState::Gaussian(GaussianBelief::from_model_prior(m)),
            FilterKind::Bpf | FilterKind::Edh | FilterKind::Ledh => {
                FilterState::Particles(WeightedParticleSet::from_prior(m, n, rng), PriorCovariance::Cloud)
            }
            FilterKind::PfpfEdh | FilterKind::PfpfLedh => {
                let cov = match cfg.pfpf_covariance {
                    PfpfCovariance::Ekf => PriorCovariance::ekf_from_prior(m),
                    PfpfCovariance::Cloud => PriorCovariance::Cloud,
                };
                FilterState::Particles(WeightedParticleSet::from_prior(m, n, rng), cov)
            }
            FilterKind::PfpfGmm => FilterState::Gmm(GmmParticleSet::from_prior(gmm(model)?, n, rng)),
            FilterKind::SmcmcPrior
            | FilterKind::SmcmcEdh
            | FilterKind::SmcmcLedh
            | FilterKind::SmcmcGmm
            | FilterKind::SmcmcGmmLedh => FilterState::Chain(EmpiricalPosterior::from_prior(m, n, rng)?, cfg.smcmc(n)?),
        };
        Ok(FilterRunner {
            spec,
            model,
            schedule: cfg.schedule()?,
            include_burnin: cfg.include_burnin,
            state,
        })
    }

    fn step(&mut self, k: usize, z: &DVector<f64>, rng: &mut dyn RngCore) -> Result<StepOutput> {
        let m = self.model.as_dyn();
        let kind = self.spec.kind;
        match &mut self.state {
            FilterState::Gaussian(belief) => {
                let (next, inc) = match kind {
                    FilterKind::Kf => {
                        let (b, inc) = kalman_step(belief, z, m)?;
                        (b, Some(inc))
                    }
                    FilterKind::Ekf => (ekf_step(belief, k, z, m)?, None),
                    _ => (ukf_step(belief, k, z, m, UkfParams::default())?, None),
                };
                *belief = next;
                Ok(StepOutput {
                    estimate: belief.mean.clone(),
                    rhos: None,
                    ess: None,
                    log_increment: inc,
                })
            }
            FilterState::Particles(set, cov) => {
                let st = match kind {
                    FilterKind::Bpf => bpf_step(set, k, z, m, rng)?,
                    FilterKind::Edh => flow_filter_step(set, k, z, m, FlowFlavor::Edh, &self.schedule, rng)?,
                    FilterKind::Ledh => flow_filter_step(set, k, z, m, FlowFlavor::Ledh, &self.schedule, rng)?,
                    FilterKind::PfpfEdh => pfpf_step_with(set, cov, k, z, m, FlowFlavor::Edh, &self.schedule, rng)?,
                    _ => pfpf_step_with(set, cov, k, z, m, FlowFlavor::Ledh, &self.schedule, rng)?,
                };
                let weighted = !matches!(kind, FilterKind::Edh | FilterKind::Ledh);
                Ok(StepOutput {
                    estimate: st.estimate,
                    rhos: None,
                    ess: weighted.then_some(st.ess),
                    log_increment: st.log_evidence_increment,
                })
            }
            FilterState::Gmm(gset) => {
                let st = pfpf_gmm_step(gset, k, z, gmm(self.model)?, &self.schedule, rng)?;
                Ok(StepOutput {
                    estimate: st.estimate,
                    rhos: None,
                    ess: Some(st.ess),
                    log_increment: st.log_evidence_increment,
                })
            }
            FilterState::Chain(post, cfg) => {
                let (next, stats) = match kind {
                    FilterKind::SmcmcGmm => smcmc_gmm_step(post, k, z, gmm(self.model)?, GmmKernelFlavor::Prior, cfg, rng)?,
                    FilterKind::SmcmcGmmLedh => smcmc_gmm_step(post, k, z, gmm(self.model)?, GmmKernelFlavor::Ledh, cfg, rng)?,
                    FilterKind::SmcmcPrior => smcmc_step(post, k, z, m, KernelFlavor::Prior, cfg, rng)?,
                    FilterKind::SmcmcEdh => smcmc_step(post, k, z, m, KernelFlavor::Edh, cfg, rng)?,
                    _ => smcmc_step(post, k, z, m, KernelFlavor::Ledh, cfg, rng)?,
                };
                let mut weights = stats.log_weights.clone();
                if self.include_burnin {
                    weights.extend_from_slice(&stats.burnin_log_weights);
                }
                let inc = if weights.is_empty() { None } else { Some(evidence_increment(&weights)?) };
                *post = next;
                Ok(StepOutput {
                    estimate: post.mean().clone(),
                    rhos: Some([stats.rho1(), stats.rho2(), stats.rho3()]),
                    ess: None,
                    log_increment: inc,
                })
            }
        }
    }
}

fn gmm(model: &BuiltModel) -> Result<&crate::model::GmmModel> {
    model
        .as_gmm()
        .ok_or_else(|| Error::Config("GMM filters require the gmm model".into()))
}

/// Runs one filter over one trial. Failures stop the filter and are
/// reported alongside the steps completed so far.
pub fn run_filter(
    spec: FilterSpec,
    cfg: &ExperimentConfig,
    model: &BuiltModel,
    traj: &Trajectory,
    true_cum_log_z: Option<&[f64]>,
) -> FilterRun {
    let label = spec.to_string();
    let mut rng = stream(cfg.seed, traj.trial as u64, &label);
    let mut steps = Vec::with_capacity(traj.len());
    let fail = |step: usize, e: Error| FailureRecord {
        trial: traj.trial,
        filter: label.clone(),
        step,
        error: e.to_string(),
    };
    let mut runner = match FilterRunner::new(spec, cfg, model, &mut rng) {
        Ok(r) => r,
        Err(e) => {
            return FilterRun {
                trial: traj.trial,
                filter: spec,
                steps,
                failure: Some(fail(0, e)),
            }
        }
    };
    let mut cum: Option<f64> = Some(0.0);
    for k in 1..=traj.len() {
        let z = traj.observation(k);
        let start = Instant::now();
        let out = match runner.step(k, &z, &mut rng) {
            Ok(o) => o,
            Err(e) => {
                return FilterRun {
                    trial: traj.trial,
                    filter: spec,
                    steps,
                    failure: Some(fail(k, e)),
                }
            }
        };
        let wall = if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 };
        let sq_error = (&out.estimate - traj.state(k)).norm_squared();
        if !sq_error.is_finite() {
            return FilterRun {
                trial: traj.trial,
                filter: spec,
                steps,
                failure: Some(fail(k, Error::Numerical("non-finite point estimate".into()))),
            };
        }
        let log_increment = out.log_increment.filter(|v| v.is_finite());
        cum = match (cum, log_increment) {
            (Some(c), Some(i)) => Some(c + i),
            _ => None,
        };
        let finite = |v: f64| v.is_finite().then_some(v);
        steps.push(StepRecord {
            trial: traj.trial,
            step: k,
            filter: label.clone(),
            n_particles: spec.n_particles,
            sq_error,
            rho1: out.rhos.and_then(|r| finite(r[0])),
            rho2: out.rhos.and_then(|r| finite(r[1])),
            rho3: out.rhos.and_then(|r| finite(r[2])),
            ess: out.ess.and_then(finite),
            log_increment,
            cum_log_z: cum,
            true_cum_log_z: true_cum_log_z.map(|t| t[k - 1]),
            wall_time_s: wall,
            estimate: cfg.detail_estimates.then(|| out.estimate.as_slice().to_vec()),
        });
    }
    FilterRun {
        trial: traj.trial,
        filter: spec,
        steps,
        failure: None,
    }
}

/// Generates one trial's data and runs the whole roster on it.
pub fn run_trial(cfg: &ExperimentConfig, model: &BuiltModel, roster: &[FilterSpec], trial: usize) -> Result<(Trajectory, Vec<FilterRun>)> {
    let m = model.as_dyn();
    let traj = trial_trajectory(cfg, m, trial)?;
    let truth = match m.linear_gaussian() {
        Some(_) => Some(cumulative_sum(&kf_log_evidence(m, &traj.observation_vectors())?)),
        None => None,
    };
    let runs = roster
        .iter()
        .map(|spec| run_filter(*spec, cfg, model, &traj, truth.as_deref()))
        .collect();
    Ok((traj, runs))
}

/// Runs every trial, in parallel over `workers` threads (all cores when
/// `None`). Results do not depend on the worker count.
pub fn run_experiment(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<RunReport> {
    cfg.validate()?;
    let roster = cfg.roster()?;
    let model = cfg.build_model()?;
    let body = || -> Result<Vec<(Trajectory, Vec<FilterRun>)>> {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, &model, &roster, t))
            .collect()
    };
    let results = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(body)?,
        None => body()?,
    };
    let mut trajectories = Vec::with_capacity(results.len());
    let mut runs = Vec::new();
    for (traj, r) in results {
        trajectories.push(traj);
        runs.extend(r);
    }
    Ok(RunReport {
        config: cfg.clone(),
        roster,
        trajectories,
        runs,
    })
}
