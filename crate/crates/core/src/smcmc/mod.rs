//! Sequential MCMC with invertible-flow joint draws and mHMC refinement.
//!
//! Each time step runs one Markov chain of `N_b + N_p` composite iterations
//! targeting `p(x_k | x_{k-1}) p(z_k | x_k) π̂_{k-1}(x_{k-1})`, where
//! `π̂_{k-1}` is the uniform mixture over the previous step's retained heads.
//! An iteration is: joint draw (history + current state), history refinement,
//! current-state refinement, and a back-solve of the auxiliary `η₀`.

mod gmm;

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::cloud_covariance;
use crate::flow::{compute_flow, FlowMap, FlowSchedule, LinearFlowCache, ModelMeasurement};
use crate::linalg::{sample_moments, SymMat};
use crate::mhmc::{mhmc_propose_accept, Metric, MetricMode, MetricTensor, MhmcConfig, ModelTarget, RefinementTarget};
use crate::model::StateSpaceModel;

pub use gmm::{
    joint_draw_gmm, propose_c, propose_d, refine_current_gmm, refine_history_gmm, smcmc_gmm_step, GmmChainState,
    GmmKernelFlavor, GmmStepKernel, LatentProposal,
};

/// Retained samples of the previous step's chain, `π̂_{k-1}`.
#[derive(Clone, Debug)]
pub struct EmpiricalPosterior {
    samples: Vec<DVector<f64>>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl EmpiricalPosterior {
    pub fn new(samples: Vec<DVector<f64>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::State("empirical posterior needs at least one sample".into()));
        }
        let (mean, cov) = sample_moments(&samples);
        Ok(EmpiricalPosterior { samples, mean, cov })
    }

    /// `n` draws from the model's initial distribution.
    pub fn from_prior(model: &dyn StateSpaceModel, n: usize, rng: &mut dyn RngCore) -> Result<Self> {
        Self::new((0..n).map(|_| model.sample_initial(rng)).collect())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.samples
    }

    pub fn sample(&self, j: usize) -> &DVector<f64> {
        &self.samples[j]
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn draw_index(&self, rng: &mut dyn RngCore) -> usize {
        rng.random_range(0..self.samples.len())
    }
}

/// Everything fixed during one time step.
pub struct StepContext<'a> {
    pub model: &'a dyn StateSpaceModel,
    pub k: usize,
    pub z: &'a DVector<f64>,
    pub posterior: &'a EmpiricalPosterior,
}

impl StepContext<'_> {
    pub fn history(&self, j: usize) -> &DVector<f64> {
        self.posterior.sample(j)
    }

    /// Predictive spread of the buffer plus process covariance plus jitter.
    pub fn buffer_covariance(&self) -> SymMat {
        let preds: Vec<DVector<f64>> = self
            .posterior
            .samples()
            .iter()
            .map(|x| self.model.predict_mean(self.k, x))
            .collect();
        let (_, spread) = sample_moments(&preds);
        cloud_covariance(&spread, &self.model.transition_covariance())
    }
}

/// Chain head with its auxiliary variable, flow map and cached log-densities.
#[derive(Clone, Debug)]
pub struct ChainState {
    /// Index of the history `x_{k-1}` in the previous step's buffer.
    pub history: usize,
    pub x: DVector<f64>,
    pub eta0: DVector<f64>,
    pub map: Arc<FlowMap>,
    /// `log p(x | x_{k-1})`.
    pub log_transition: f64,
    /// `log p(z | x)`.
    pub log_likelihood: f64,
    /// `log p(η₀ | x_{k-1})`.
    pub log_eta0: f64,
}

impl ChainState {
    pub fn evaluate(ctx: &StepContext, history: usize, x: DVector<f64>, eta0: DVector<f64>, map: Arc<FlowMap>) -> Self {
        let xp = ctx.history(history);
        ChainState {
            history,
            log_transition: ctx.model.transition_log_density(ctx.k, &x, xp),
            log_likelihood: ctx.model.log_likelihood(ctx.z, &x),
            log_eta0: ctx.model.transition_log_density(ctx.k, &eta0, xp),
            x,
            eta0,
            map,
        }
    }

    /// `log q(x | x_{k-1}) = log p(η₀ | x_{k-1}) − log|det C|`.
    pub fn log_proposal(&self) -> f64 {
        self.log_eta0 - self.map.log_det()
    }

    /// Importance log-weight `log p(x|x_{k-1}) + log p(z|x) − log q(x)`.
    pub fn log_weight(&self) -> f64 {
        self.log_transition + self.log_likelihood - self.log_proposal()
    }

    /// Recomputes `η₀` from `x` and refreshes the auxiliary density.
    fn back_solve(&mut self, ctx: &StepContext) {
        self.eta0 = self.map.invert(&self.x);
        self.log_eta0 = ctx.model.transition_log_density(ctx.k, &self.eta0, ctx.history(self.history));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFlavor {
    Prior,
    Edh,
    Ledh,
}

/// Joint-draw machinery prepared once per time step.
pub struct StepKernel {
    flavor: KernelFlavor,
    schedule: FlowSchedule,
    shared: Arc<FlowMap>,
    ledh_cov: SymMat,
    cache: Option<LinearFlowCache>,
}

impl StepKernel {
    /// For EDH this builds the shared map from `g(x̄_{k-1})` with the buffer
    /// covariance; LEDH maps use the transition covariance.
    pub fn prepare(flavor: KernelFlavor, ctx: &StepContext, schedule: &FlowSchedule) -> Result<Self> {
        let d = ctx.model.dim_state();
        let ledh_cov = ctx.model.transition_covariance();
        let (shared, cache) = match flavor {
            KernelFlavor::Prior => (Arc::new(FlowMap::identity(d)), None),
            KernelFlavor::Edh => {
                let center = ctx.model.predict_mean(ctx.k, ctx.posterior.mean());
                let p = ctx.buffer_covariance();
                let mut map = compute_flow(&center, &p, ctx.z, &ModelMeasurement(ctx.model), schedule)?;
                map.materialize();
                (Arc::new(map), None)
            }
            KernelFlavor::Ledh => {
                let cache = if ctx.model.measurement_is_linear() && !ledh_cov.is_diag() {
                    Some(LinearFlowCache::new(&ledh_cov, ctx.z, &ModelMeasurement(ctx.model), schedule)?)
                } else {
                    None
                };
                (Arc::new(FlowMap::identity(d)), cache)
            }
        };
        Ok(StepKernel {
            flavor,
            schedule: schedule.clone(),
            shared,
            ledh_cov,
            cache,
        })
    }

    pub fn flavor(&self) -> KernelFlavor {
        self.flavor
    }

    /// The map shared by all proposals (identity for the prior kernel).
    pub fn shared_map(&self) -> Option<&Arc<FlowMap>> {
        (self.flavor != KernelFlavor::Ledh).then_some(&self.shared)
    }

    /// Map used for a proposal whose history is `history`.
    pub fn map_for(&self, ctx: &StepContext, history: usize) -> Result<Arc<FlowMap>> {
        match self.flavor {
            KernelFlavor::Prior | KernelFlavor::Edh => Ok(self.shared.clone()),
            KernelFlavor::Ledh => {
                let start = ctx.model.predict_mean(ctx.k, ctx.history(history));
                let map = match &self.cache {
                    Some(c) => c.map_for(&start),
                    None => compute_flow(&start, &self.ledh_cov, ctx.z, &ModelMeasurement(ctx.model), &self.schedule)?,
                };
                Ok(Arc::new(map))
            }
        }
    }

    /// Chain start: one draw from the kernel's own proposal, retried when
    /// the flow for the drawn history fails.
    pub fn initial_state(&self, ctx: &StepContext, rng: &mut dyn RngCore) -> Result<ChainState> {
        let mut last = None;
        for _ in 0..INIT_ATTEMPTS {
            let j = ctx.posterior.draw_index(rng);
            let eta0 = ctx.model.sample_transition(ctx.k, ctx.history(j), rng);
            match self.map_for(ctx, j) {
                Ok(map) => {
                    let x = map.apply(&eta0);
                    return Ok(ChainState::evaluate(ctx, j, x, eta0, map));
                }
                Err(e @ Error::FlowFailure { .. }) | Err(e @ Error::Numerical(_)) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Flow failures tolerated before a chain start gives up.
pub(crate) const INIT_ATTEMPTS: usize = 100;

/// Result of one joint draw.
#[derive(Clone, Debug)]
pub struct JointDrawOutcome {
    pub accepted: bool,
    /// `log ρ₁` before clamping; `-inf` when the proposal could not be built.
    pub log_accept_ratio: f64,
    pub proposal: Option<ChainState>,
    /// Importance log-weight of the proposal for the evidence estimate.
    pub log_weight: f64,
}

/// Full ratio: target times reverse proposal over forward, with `|det C|`.
pub fn joint_log_ratio(current: &ChainState, proposal: &ChainState) -> f64 {
    proposal.log_weight() - current.log_weight()
}

/// Shared-map ratio: the `|det C|` terms cancel and are omitted.
pub fn shared_map_log_ratio(current: &ChainState, proposal: &ChainState) -> f64 {
    (proposal.log_transition + proposal.log_likelihood - proposal.log_eta0)
        - (current.log_transition + current.log_likelihood - current.log_eta0)
}

fn finish_joint(chain: &mut ChainState, proposal: ChainState, log_ratio: f64, rng: &mut dyn RngCore) -> JointDrawOutcome {
    let u: f64 = rng.random();
    let log_ratio = if log_ratio.is_nan() { f64::NEG_INFINITY } else { log_ratio };
    let accepted = u.ln() < log_ratio.min(0.0);
    let log_weight = proposal.log_weight();
    if accepted {
        *chain = proposal.clone();
    }
    JointDrawOutcome {
        accepted,
        log_accept_ratio: log_ratio,
        proposal: Some(proposal),
        log_weight,
    }
}

fn rejected_draw(rng: &mut dyn RngCore) -> JointDrawOutcome {
    let _: f64 = rng.random();
    JointDrawOutcome {
        accepted: false,
        log_accept_ratio: f64::NEG_INFINITY,
        proposal: None,
        log_weight: f64::NEG_INFINITY,
    }
}

/// Joint draw with the step's kernel: history from `π̂_{k-1}`, `η₀` from the
/// dynamics, `x = C η₀ + D`. A failed flow rejects.
pub fn joint_draw(chain: &mut ChainState, ctx: &StepContext, kernel: &StepKernel, rng: &mut dyn RngCore) -> Result<JointDrawOutcome> {
    let j = ctx.posterior.draw_index(rng);
    let eta0 = ctx.model.sample_transition(ctx.k, ctx.history(j), rng);
    let map = match kernel.map_for(ctx, j) {
        Ok(m) => m,
        Err(Error::FlowFailure { .. }) | Err(Error::Numerical(_)) => return Ok(rejected_draw(rng)),
        Err(e) => return Err(e),
    };
    let x = map.apply(&eta0);
    let proposal = ChainState::evaluate(ctx, j, x, eta0, map);
    let log_ratio = match kernel.flavor {
        KernelFlavor::Ledh => joint_log_ratio(chain, &proposal),
        _ => shared_map_log_ratio(chain, &proposal),
    };
    Ok(finish_joint(chain, proposal, log_ratio, rng))
}

/// Joint draw proposing from the dynamics (identity map).
pub fn joint_draw_prior(chain: &mut ChainState, ctx: &StepContext, kernel: &StepKernel, rng: &mut dyn RngCore) -> Result<JointDrawOutcome> {
    check_flavor(kernel, KernelFlavor::Prior)?;
    joint_draw(chain, ctx, kernel, rng)
}

/// Joint draw through the step's shared EDH map.
pub fn joint_draw_edh(chain: &mut ChainState, ctx: &StepContext, kernel: &StepKernel, rng: &mut dyn RngCore) -> Result<JointDrawOutcome> {
    check_flavor(kernel, KernelFlavor::Edh)?;
    joint_draw(chain, ctx, kernel, rng)
}

/// Joint draw through a per-proposal LEDH map.
pub fn joint_draw_ledh(chain: &mut ChainState, ctx: &StepContext, kernel: &StepKernel, rng: &mut dyn RngCore) -> Result<JointDrawOutcome> {
    check_flavor(kernel, KernelFlavor::Ledh)?;
    joint_draw(chain, ctx, kernel, rng)
}

fn check_flavor(kernel: &StepKernel, want: KernelFlavor) -> Result<()> {
    if kernel.flavor != want {
        return Err(Error::Usage(format!("kernel prepared as {:?}, called as {:?}", kernel.flavor, want)));
    }
    Ok(())
}

/// Shared EDH map for the step plus the chain's starting state.
pub fn precompute_edh_flow(ctx: &StepContext, schedule: &FlowSchedule, rng: &mut dyn RngCore) -> Result<(StepKernel, ChainState)> {
    let kernel = StepKernel::prepare(KernelFlavor::Edh, ctx, schedule)?;
    let init = kernel.initial_state(ctx, rng)?;
    Ok((kernel, init))
}

#[derive(Clone, Debug)]
pub struct HistoryOutcome {
    pub accepted: bool,
    pub log_accept_ratio: f64,
    pub proposed: usize,
}

/// Independent history move from `π̂_{k-1}` with
/// `ρ₂ = p(x | x*_{k-1}) / p(x | x_{k-1})`. After an accepted move the
/// chain's map is rebuilt for the new history so its cached proposal
/// density stays exact.
pub fn refine_history(chain: &mut ChainState, ctx: &StepContext, kernel: &StepKernel, rng: &mut dyn RngCore) -> Result<HistoryOutcome> {
    let j = ctx.posterior.draw_index(rng);
    let lt_new = ctx.model.transition_log_density(ctx.k, &chain.x, ctx.history(j));
    let log_ratio = lt_new - chain.log_transition;
    let log_ratio = if log_ratio.is_nan() { f64::NEG_INFINITY } else { log_ratio };
    let u: f64 = rng.random();
    let mut accepted = u.ln() < log_ratio.min(0.0);
    if accepted {
        match kernel.map_for(ctx, j) {
            Ok(map) => {
                chain.history = j;
                chain.log_transition = lt_new;
                chain.map = map;
                chain.back_solve(ctx);
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

/// mHMC move of the head given the history, then the `η₀` back-solve.
pub fn refine_current(
    chain: &mut ChainState,
    ctx: &StepContext,
    config: &MhmcConfig,
    metric: Option<&MetricTensor>,
    rng: &mut dyn RngCore,
) -> Result<bool> {
    let xp = ctx.history(chain.history);
    let target = ModelTarget { model: ctx.model, k: ctx.k, x_prev: xp, z: ctx.z };
    let m = match metric {
        Some(m) => Metric::Fixed(m),
        None => Metric::PositionDependent,
    };
    let out = mhmc_propose_accept(&chain.x, &target, config, m, rng)?;
    if out.accepted {
        chain.x = out.x;
        chain.log_transition = ctx.model.transition_log_density(ctx.k, &chain.x, xp);
        chain.log_likelihood = ctx.model.log_likelihood(ctx.z, &chain.x);
        chain.back_solve(ctx);
    }
    Ok(out.accepted)
}

/// Per-step acceptance counts, evidence weights and timing.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub iterations: usize,
    pub joint_accepted: usize,
    pub history_accepted: usize,
    pub refine_accepted: usize,
    pub refine_attempted: usize,
    pub history_attempted: usize,
    pub flow_failures: usize,
    /// Importance log-weights of post-burn-in joint-draw proposals.
    pub log_weights: Vec<f64>,
    pub burnin_log_weights: Vec<f64>,
    pub wall_time_s: f64,
}

impl StepStats {
    pub fn rho1(&self) -> f64 {
        ratio(self.joint_accepted, self.iterations)
    }
    pub fn rho2(&self) -> f64 {
        ratio(self.history_accepted, self.history_attempted)
    }
    pub fn rho3(&self) -> f64 {
        ratio(self.refine_accepted, self.refine_attempted)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        f64::NAN
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmcmcConfig {
    pub n_particles: usize,
    pub n_burnin: usize,
    pub refine_history: bool,
    pub refine_current: bool,
    pub mhmc: MhmcConfig,
    pub schedule: FlowSchedule,
}

impl SmcmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::Config("n_particles must be at least 1".into()));
        }
        if self.refine_current {
            self.mhmc.validate()?;
        }
        Ok(())
    }
}

/// Constant metric at the predicted buffer mean, or `None` for a
/// position-dependent metric.
pub fn step_metric(ctx: &StepContext, config: &MhmcConfig) -> Result<Option<MetricTensor>> {
    match config.metric_mode {
        MetricMode::Constant => {
            let reference = ctx.model.predict_mean(ctx.k, ctx.posterior.mean());
            let xp = ctx.posterior.mean();
            let target = ModelTarget { model: ctx.model, k: ctx.k, x_prev: xp, z: ctx.z };
            Ok(Some(MetricTensor::new(target.metric(&reference))?))
        }
        MetricMode::PositionDependent => Ok(None),
    }
}

/// One SMCMC time step; returns the retained heads and the step statistics.
pub fn smcmc_step(
    posterior: &EmpiricalPosterior,
    k: usize,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
    flavor: KernelFlavor,
    config: &SmcmcConfig,
    rng: &mut dyn RngCore,
) -> Result<(EmpiricalPosterior, StepStats)> {
    config.validate()?;
    let start = Instant::now();
    let ctx = StepContext { model, k, z, posterior };
    let kernel = StepKernel::prepare(flavor, &ctx, &config.schedule)?;
    let metric = if config.refine_current { step_metric(&ctx, &config.mhmc)? } else { None };
    let mut chain = kernel.initial_state(&ctx, rng)?;
    let mut stats = StepStats::default();
    let total = config.n_burnin + config.n_particles;
    let mut retained = Vec::with_capacity(config.n_particles);
    for it in 0..total {
        let out = joint_draw(&mut chain, &ctx, &kernel, rng)?;
        stats.iterations += 1;
        stats.joint_accepted += out.accepted as usize;
        stats.flow_failures += out.proposal.is_none() as usize;
        if it >= config.n_burnin {
            stats.log_weights.push(out.log_weight);
        } else {
            stats.burnin_log_weights.push(out.log_weight);
        }
        if config.refine_history {
            let h = refine_history(&mut chain, &ctx, &kernel, rng)?;
            stats.history_attempted += 1;
            stats.history_accepted += h.accepted as usize;
        }
        if config.refine_current {
            stats.refine_attempted += 1;
            stats.refine_accepted += refine_current(&mut chain, &ctx, &config.mhmc, metric.as_ref(), rng)? as usize;
        }
        if it >= config.n_burnin {
            retained.push(chain.x.clone());
        }
    }
    stats.wall_time_s = start.elapsed().as_secs_f64();
    Ok((EmpiricalPosterior::new(retained)?, stats))
}
