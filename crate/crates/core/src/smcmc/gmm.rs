//! SMCMC for Gaussian-mixture noise: the chain also carries the process
//! component `d` and the measurement component `c`, drawn by the joint move
//! from data-informed proposals and discarded after each step.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{EmpiricalPosterior, HistoryOutcome, JointDrawOutcome, SmcmcConfig, StepStats};
use crate::error::{Error, Result};
use crate::flow::{compute_gmm_conditioned_flow, FlowMap};
use crate::linalg::log_sum_exp;
use crate::mhmc::{mhmc_propose_accept, GmmComponentTarget, Metric, MetricMode, MetricTensor, RefinementTarget};
use crate::model::{sample_categorical, GmmModel, StateSpaceModel};

/// Normalized categorical proposal over mixture components.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentProposal {
    pub log_probs: Vec<f64>,
}

impl LatentProposal {
    /// Normalizes `log_mass`; falls back to `fallback` when every entry
    /// underflows or is undefined.
    fn normalized(log_mass: Vec<f64>, fallback: impl Fn(usize) -> f64) -> Self {
        let lse = log_sum_exp(&log_mass);
        let log_probs = if lse.is_finite() {
            log_mass.iter().map(|l| l - lse).collect()
        } else {
            (0..log_mass.len()).map(fallback).collect()
        };
        LatentProposal { log_probs }
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> usize {
        sample_categorical(&self.log_probs, rng)
    }

    pub fn log_prob(&self, i: usize) -> f64 {
        self.log_probs[i]
    }
}

/// `q(d = m | x_{k-1}, z) ∝ α_m p(η̄₀_m | x_{k-1}, m) p(z | η̄₀_m)` with
/// `η̄₀_m = f_k(x_{k-1}) + ψ_m` and the mixture likelihood.
pub fn propose_d(model: &GmmModel, k: usize, x_prev: &DVector<f64>, z: &DVector<f64>) -> LatentProposal {
    let mass = (0..model.n_process_components())
        .map(|m| {
            let center = model.component_transition_mean(k, x_prev, m);
            model.log_process_weight(m)
                + model.component_transition_log_density_at(&center, &center, m)
                + model.log_likelihood(z, &center)
        })
        .collect();
    LatentProposal::normalized(mass, |m| model.log_process_weight(m))
}

/// `q(c = n | x_{k-1}, d, z) ∝ β_n p(z | η̄₀_d, c = n)`.
pub fn propose_c(model: &GmmModel, k: usize, x_prev: &DVector<f64>, d: usize, z: &DVector<f64>) -> LatentProposal {
    let center = model.component_transition_mean(k, x_prev, d);
    let mass = (0..model.n_noise_components())
        .map(|n| model.log_noise_weight(n) + model.component_log_likelihood(z, &center, n))
        .collect();
    LatentProposal::normalized(mass, |n| model.log_noise_weight(n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GmmKernelFlavor {
    /// Component-conditioned LEDH flow with data-informed component draws.
    Ledh,
    /// Same component proposals, state drawn from the component-conditioned
    /// dynamics without a flow.
    Prior,
}

/// Chain head of the mixture sampler.
#[derive(Clone, Debug)]
pub struct GmmChainState {
    pub history: usize,
    pub process_component: usize,
    pub noise_component: usize,
    pub x: DVector<f64>,
    pub eta0: DVector<f64>,
    pub map: Arc<FlowMap>,
    /// `log p(x | x_{k-1}, d)`.
    pub log_transition: f64,
    /// `log p(z | x, c)`.
    pub log_likelihood: f64,
    /// `log p(η₀ | x_{k-1}, d)`.
    pub log_eta0: f64,
    /// `log q(d | x_{k-1}, z)`.
    pub log_q_process: f64,
    /// `log q(c | x_{k-1}, d, z)`.
    pub log_q_noise: f64,
}

impl GmmChainState {
    /// `log α_d + log β_c + log p(x|x_{k-1},d) + log p(z|x,c)
    ///  − log q(d) − log q(c) − log p(η₀|x_{k-1},d) + log|det C|`.
    pub fn log_weight(&self, model: &GmmModel) -> f64 {
        model.log_process_weight(self.process_component)
            + model.log_noise_weight(self.noise_component)
            + self.log_transition
            + self.log_likelihood
            - self.log_q_process
            - self.log_q_noise
            - self.log_eta0
            + self.map.log_det()
    }
}

/// Step-level data for the mixture sampler.
pub struct GmmStepKernel<'a> {
    pub model: &'a GmmModel,
    pub k: usize,
    pub z: &'a DVector<f64>,
    pub posterior: &'a EmpiricalPosterior,
    pub flavor: GmmKernelFlavor,
    pub schedule: crate::flow::FlowSchedule,
    identity: Arc<FlowMap>,
}

impl<'a> GmmStepKernel<'a> {
    pub fn new(
        model: &'a GmmModel,
        k: usize,
        z: &'a DVector<f64>,
        posterior: &'a EmpiricalPosterior,
        flavor: GmmKernelFlavor,
        schedule: &crate::flow::FlowSchedule,
    ) -> Self {
        GmmStepKernel {
            model,
            k,
            z,
            posterior,
            flavor,
            schedule: schedule.clone(),
            identity: Arc::new(FlowMap::identity(model.dim_state())),
        }
    }

    fn history(&self, j: usize) -> &DVector<f64> {
        self.posterior.sample(j)
    }

    fn latent_proposals(&self, j: usize) -> LatentProposal {
        propose_d(self.model, self.k, self.history(j), self.z)
    }

    fn noise_proposal(&self, j: usize, d: usize) -> LatentProposal {
        propose_c(self.model, self.k, self.history(j), d, self.z)
    }

    fn map_for(&self, j: usize, d: usize, c: usize) -> Result<Arc<FlowMap>> {
        match self.flavor {
            GmmKernelFlavor::Prior => Ok(self.identity.clone()),
            GmmKernelFlavor::Ledh => Ok(Arc::new(compute_gmm_conditioned_flow(
                self.k,
                self.history(j),
                self.z,
                self.model,
                d,
                c,
                &self.schedule,
            )?)),
        }
    }

    /// Assembles a state and its cached densities.
    #[allow(clippy::too_many_arguments)]
    fn evaluate(&self, j: usize, d: usize, c: usize, x: DVector<f64>, eta0: DVector<f64>, map: Arc<FlowMap>, log_qd: f64, log_qc: f64) -> GmmChainState {
        let xp = self.history(j);
        GmmChainState {
            history: j,
            process_component: d,
            noise_component: c,
            log_transition: self.model.component_transition_log_density(self.k, &x, xp, d),
            log_likelihood: self.model.component_log_likelihood(self.z, &x, c),
            log_eta0: self.model.component_transition_log_density(self.k, &eta0, xp, d),
            log_q_process: log_qd,
            log_q_noise: log_qc,
            x,
            eta0,
            map,
        }
    }

    fn back_solve(&self, s: &mut GmmChainState) {
        s.eta0 = s.map.invert(&s.x);
        s.log_eta0 = self
            .model
            .component_transition_log_density(self.k, &s.eta0, self.history(s.history), s.process_component);
    }

    /// Chain start: one draw from the kernel's own proposal, retried when
    /// the flow fails.
    pub fn initial_state(&self, rng: &mut dyn RngCore) -> Result<GmmChainState> {
        let mut last = None;
        for _ in 0..super::INIT_ATTEMPTS {
            let j = self.posterior.draw_index(rng);
            let qd = self.latent_proposals(j);
            let d = qd.sample(rng);
            let eta0 = self.model.sample_component_transition(self.k, self.history(j), d, rng);
            let qc = self.noise_proposal(j, d);
            let c = qc.sample(rng);
            match self.map_for(j, d, c) {
                Ok(map) => {
                    let x = map.apply(&eta0);
                    return Ok(self.evaluate(j, d, c, x, eta0, map, qd.log_prob(d), qc.log_prob(c)));
                }
                Err(e @ Error::FlowFailure { .. }) | Err(e @ Error::Numerical(_)) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Joint draw of `(x_{k-1}, d, c, x_k)`; `ρ₁` is the ratio of importance
/// weights with the auxiliary densities evaluated at `η₀`.
pub fn joint_draw_gmm(chain: &mut GmmChainState, kernel: &GmmStepKernel, rng: &mut dyn RngCore) -> Result<(JointDrawOutcome, Option<GmmChainState>)> {
    let j = kernel.posterior.draw_index(rng);
    let qd = kernel.latent_proposals(j);
    let d = qd.sample(rng);
    let eta0 = kernel.model.sample_component_transition(kernel.k, kernel.history(j), d, rng);
    let qc = kernel.noise_proposal(j, d);
    let c = qc.sample(rng);
    let map = match kernel.map_for(j, d, c) {
        Ok(m) => m,
        Err(Error::FlowFailure { .. }) | Err(Error::Numerical(_)) => {
            let _: f64 = rng.random();
            let out = JointDrawOutcome {
                accepted: false,
                log_accept_ratio: f64::NEG_INFINITY,
                proposal: None,
                log_weight: f64::NEG_INFINITY,
            };
            return Ok((out, None));
        }
        Err(e) => return Err(e),
    };
    let x = map.apply(&eta0);
    let proposal = kernel.evaluate(j, d, c, x, eta0, map, qd.log_prob(d), qc.log_prob(c));
    let log_weight = proposal.log_weight(kernel.model);
    let log_ratio = log_weight - chain.log_weight(kernel.model);
    let log_ratio = if log_ratio.is_nan() { f64::NEG_INFINITY } else { log_ratio };
    let u: f64 = rng.random();
    let accepted = u.ln() < log_ratio.min(0.0);
    if accepted {
        *chain = proposal.clone();
    }
    let out = JointDrawOutcome {
        accepted,
        log_accept_ratio: log_ratio,
        proposal: None,
        log_weight,
    };
    Ok((out, Some(proposal)))
}

/// History move with `ρ₂ = p(x | x*_{k-1}, d) / p(x | x_{k-1}, d)`; on
/// acceptance the component proposals and map are rebuilt for the new history.
pub fn refine_history_gmm(chain: &mut GmmChainState, kernel: &GmmStepKernel, rng: &mut dyn RngCore) -> Result<HistoryOutcome> {
    let j = kernel.posterior.draw_index(rng);
    let d = chain.process_component;
    let lt_new = kernel.model.component_transition_log_density(kernel.k, &chain.x, kernel.history(j), d);
    let log_ratio = lt_new - chain.log_transition;
    let log_ratio = if log_ratio.is_nan() { f64::NEG_INFINITY } else { log_ratio };
    let u: f64 = rng.random();
    let mut accepted = u.ln() < log_ratio.min(0.0);
    if accepted {
        match kernel.map_for(j, d, chain.noise_component) {
            Ok(map) => {
                chain.history = j;
                chain.log_transition = lt_new;
                chain.log_q_process = kernel.latent_proposals(j).log_prob(d);
                chain.log_q_noise = kernel.noise_proposal(j, d).log_prob(chain.noise_component);
                chain.map = map;
                kernel.back_solve(chain);
            }
            Err(Error::FlowFailure { .. }) | Err(Error::Numerical(_)) => accepted = false,
            Err(e) => return Err(e),
        }
    }
    Ok(HistoryOutcome {
        accepted,
        log_accept_ratio: log_ratio,
        proposed: j,
    })
}

/// mHMC move of the head given history and components.
pub fn refine_current_gmm(
    chain: &mut GmmChainState,
    kernel: &GmmStepKernel,
    config: &crate::mhmc::MhmcConfig,
    metrics: Option<&[Vec<MetricTensor>]>,
    rng: &mut dyn RngCore,
) -> Result<bool> {
    let xp = kernel.history(chain.history);
    let (d, c) = (chain.process_component, chain.noise_component);
    let target = GmmComponentTarget {
        model: kernel.model,
        k: kernel.k,
        x_prev: xp,
        z: kernel.z,
        process_component: d,
        noise_component: c,
    };
    let metric = match metrics {
        Some(m) => Metric::Fixed(&m[d][c]),
        None => Metric::PositionDependent,
    };
    let out = mhmc_propose_accept(&chain.x, &target, config, metric, rng)?;
    if out.accepted {
        chain.x = out.x;
        chain.log_transition = kernel.model.component_transition_log_density(kernel.k, &chain.x, xp, d);
        chain.log_likelihood = kernel.model.component_log_likelihood(kernel.z, &chain.x, c);
        kernel.back_solve(chain);
    }
    Ok(out.accepted)
}

/// Constant metrics per component pair at the conditioned predicted mean.
fn component_metrics(kernel: &GmmStepKernel) -> Result<Vec<Vec<MetricTensor>>> {
    let xbar = kernel.posterior.mean();
    (0..kernel.model.n_process_components())
        .map(|d| {
            let reference = kernel.model.component_transition_mean(kernel.k, xbar, d);
            (0..kernel.model.n_noise_components())
                .map(|c| {
                    let target = GmmComponentTarget {
                        model: kernel.model,
                        k: kernel.k,
                        x_prev: xbar,
                        z: kernel.z,
                        process_component: d,
                        noise_component: c,
                    };
                    MetricTensor::new(target.metric(&reference))
                })
                .collect()
        })
        .collect()
}

/// One step of the mixture sampler; latent components are dropped from the
/// retained output.
pub fn smcmc_gmm_step(
    posterior: &EmpiricalPosterior,
    k: usize,
    z: &DVector<f64>,
    model: &GmmModel,
    flavor: GmmKernelFlavor,
    config: &SmcmcConfig,
    rng: &mut dyn RngCore,
) -> Result<(EmpiricalPosterior, StepStats)> {
    config.validate()?;
    let start = Instant::now();
    let kernel = GmmStepKernel::new(model, k, z, posterior, flavor, &config.schedule);
    let metrics = match (config.refine_current, config.mhmc.metric_mode) {
        (true, MetricMode::Constant) => Some(component_metrics(&kernel)?),
        _ => None,
    };
    let mut chain = kernel.initial_state(rng)?;
    let mut stats = StepStats::default();
    let mut retained = Vec::with_capacity(config.n_particles);
    for it in 0..config.n_burnin + config.n_particles {
        let (out, proposal) = joint_draw_gmm(&mut chain, &kernel, rng)?;
        stats.iterations += 1;
        stats.joint_accepted += out.accepted as usize;
        stats.flow_failures += proposal.is_none() as usize;
        if it >= config.n_burnin {
            stats.log_weights.push(out.log_weight);
        } else {
            stats.burnin_log_weights.push(out.log_weight);
        }
        if config.refine_history {
            stats.history_attempted += 1;
            stats.history_accepted += refine_history_gmm(&mut chain, &kernel, rng)?.accepted as usize;
        }
        if config.refine_current {
            stats.refine_attempted += 1;
            stats.refine_accepted += refine_current_gmm(&mut chain, &kernel, &config.mhmc, metrics.as_deref(), rng)? as usize;
        }
        if it >= config.n_burnin {
            retained.push(chain.x.clone());
        }
    }
    stats.wall_time_s = start.elapsed().as_secs_f64();
    Ok((EmpiricalPosterior::new(retained)?, stats))
}
