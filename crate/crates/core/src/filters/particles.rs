use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{
    compute_flow, compute_gmm_conditioned_flow_with_covariance, flow_proposal_log_density, FlowMap, FlowSchedule,
    LinearFlowCache, ModelMeasurement,
};
use crate::linalg::{log_sum_exp, symmetrize, SymMat, JITTER_REL};
use crate::model::{sample_categorical, GmmModel, StateSpaceModel};

/// Weighted particle approximation; log-weights are kept normalized.
#[derive(Clone, Debug)]
pub struct WeightedParticleSet {
    pub particles: Vec<DVector<f64>>,
    pub log_weights: Vec<f64>,
}

impl WeightedParticleSet {
    pub fn uniform(particles: Vec<DVector<f64>>) -> Self {
        let n = particles.len();
        let lw = -(n as f64).ln();
        WeightedParticleSet {
            particles,
            log_weights: vec![lw; n],
        }
    }

    /// `n` draws from the model's initial distribution.
    pub fn from_prior(model: &dyn StateSpaceModel, n: usize, rng: &mut dyn RngCore) -> Self {
        Self::uniform((0..n).map(|_| model.sample_initial(rng)).collect())
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles.first().map_or(0, |p| p.len())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    /// `1 / Σ w_i²` for the normalized weights.
    pub fn ess(&self) -> f64 {
        let s: f64 = self.log_weights.iter().map(|l| (2.0 * l).exp()).sum();
        (1.0 / s).clamp(1.0, self.len() as f64)
    }

    pub fn weighted_mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (p, lw) in self.particles.iter().zip(&self.log_weights) {
            m += p * lw.exp();
        }
        m
    }

    /// Weighted covariance of `f(x_i)` around its weighted mean.
    pub fn weighted_covariance_of(&self, f: &dyn Fn(&DVector<f64>) -> DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mapped: Vec<DVector<f64>> = self.particles.iter().map(f).collect();
        let d = mapped.first().map_or(0, |v| v.len());
        let w = self.weights();
        let mut mean = DVector::zeros(d);
        for (v, wi) in mapped.iter().zip(&w) {
            mean += v * *wi;
        }
        let mut cov = DMatrix::zeros(d, d);
        for (v, wi) in mapped.iter().zip(&w) {
            let r = v - &mean;
            cov.ger(*wi, &r, &r, 1.0);
        }
        symmetrize(&mut cov);
        (mean, cov)
    }

    /// Adds unnormalized log-increments, renormalizes and returns the
    /// log-evidence increment `log Σ_i w_i exp(inc_i)`.
    pub fn reweight(&mut self, increments: &[f64]) -> Result<f64> {
        let combined: Vec<f64> = self
            .log_weights
            .iter()
            .zip(increments)
            .map(|(lw, inc)| if inc.is_nan() { f64::NEG_INFINITY } else { lw + inc })
            .collect();
        let total = log_sum_exp(&combined);
        if !total.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        self.log_weights = combined.iter().map(|c| c - total).collect();
        Ok(total)
    }

    /// Systematic resampling indices for the current weights.
    pub fn systematic_indices(&self, rng: &mut dyn RngCore) -> Vec<usize> {
        let n = self.len();
        let u0: f64 = rng.random::<f64>() / n as f64;
        let mut out = Vec::with_capacity(n);
        let mut cum = 0.0;
        let mut i = 0;
        let w = self.weights();
        for j in 0..n {
            let u = u0 + j as f64 / n as f64;
            while i < n - 1 && cum + w[i] < u {
                cum += w[i];
                i += 1;
            }
            out.push(i);
        }
        out
    }

    pub fn resample(&mut self, rng: &mut dyn RngCore) -> Vec<usize> {
        let idx = self.systematic_indices(rng);
        self.particles = idx.iter().map(|&i| self.particles[i].clone()).collect();
        let lw = -(self.len() as f64).ln();
        self.log_weights = vec![lw; self.len()];
        idx
    }
}

/// Per-step outputs of a particle filter.
#[derive(Clone, Debug)]
pub struct ParticleStep {
    /// Weighted mean before resampling.
    pub estimate: DVector<f64>,
    /// `None` for filters without importance weights.
    pub log_evidence_increment: Option<f64>,
    /// Post-weighting, pre-resampling.
    pub ess: f64,
    pub resampled: bool,
}

fn finish_weighted(set: &mut WeightedParticleSet, increments: &[f64], rng: &mut dyn RngCore) -> Result<(ParticleStep, Option<Vec<usize>>)> {
    let inc = set.reweight(increments)?;
    let ess = set.ess();
    let estimate = set.weighted_mean();
    let resampled = ess < 0.5 * set.len() as f64;
    let idx = resampled.then(|| set.resample(rng));
    Ok((
        ParticleStep {
            estimate,
            log_evidence_increment: Some(inc),
            ess,
            resampled,
        },
        idx,
    ))
}

/// Bootstrap particle filter step: propagate through the dynamics, weight by
/// the likelihood, resample systematically when ESS < N/2.
pub fn bpf_step(
    set: &mut WeightedParticleSet,
    k: usize,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
    rng: &mut dyn RngCore,
) -> Result<ParticleStep> {
    for p in set.particles.iter_mut() {
        *p = model.sample_transition(k, p, rng);
    }
    let inc: Vec<f64> = set.particles.par_iter().map(|x| model.log_likelihood(z, x)).collect();
    finish_weighted(set, &inc, rng).map(|r| r.0)
}

/// EDH flows share one map built at a central point; LEDH builds one per particle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowFlavor {
    Edh,
    Ledh,
}

/// Moment-matched predictive covariance from a particle cloud: spread of the
/// predicted means plus the (effective) process covariance plus jitter.
pub fn predictive_covariance(
    model: &dyn StateSpaceModel,
    k: usize,
    prev: &WeightedParticleSet,
) -> (DVector<f64>, SymMat) {
    let (mean, spread) = prev.weighted_covariance_of(&|x| model.predict_mean(k, x));
    (mean, cloud_covariance(&spread, &model.transition_covariance()))
}

/// `spread + q + 1e-8·tr/d·I`, keeping `q`'s structure when the spread is zero.
pub fn cloud_covariance(spread: &DMatrix<f64>, q: &SymMat) -> SymMat {
    let d = q.dim();
    let jitter = JITTER_REL * (q.trace() + spread.trace()) / d as f64;
    if spread.amax() == 0.0 {
        q.add_to_diagonal(jitter)
    } else {
        SymMat::Full(spread.clone()).add(q).add_to_diagonal(jitter)
    }
}

/// Where PF-PF takes the flow's prior covariance `P` from.
#[derive(Clone, Debug)]
pub enum PriorCovariance {
    /// Weighted spread of the predicted particle means plus `Q`.
    Cloud,
    /// Covariance propagated by an EKF running alongside the particles:
    /// predicted with the dynamics Jacobian at the weighted mean, updated
    /// after the flow at the new estimate.
    Ekf(DMatrix<f64>),
}

impl PriorCovariance {
    pub fn ekf_from_prior(model: &dyn StateSpaceModel) -> Self {
        PriorCovariance::Ekf(model.initial_covariance().to_dense())
    }

    fn predict(&self, model: &dyn StateSpaceModel, k: usize, set: &WeightedParticleSet) -> (DVector<f64>, SymMat) {
        match self {
            PriorCovariance::Cloud => predictive_covariance(model, k, set),
            PriorCovariance::Ekf(cov) => {
                let prev_mean = set.weighted_mean();
                let (central, _) = set.weighted_covariance_of(&|x| model.predict_mean(k, x));
                let f = model.transition_jacobian(k, &prev_mean);
                let mut pred = &f * cov * f.transpose();
                symmetrize(&mut pred);
                (central, cloud_covariance(&pred, &model.transition_covariance()))
            }
        }
    }

    fn update(&mut self, model: &dyn StateSpaceModel, pred: &SymMat, estimate: &DVector<f64>) -> Result<()> {
        if let PriorCovariance::Ekf(cov) = self {
            let p = pred.to_dense();
            let h = model.measurement_jacobian(estimate).to_dense();
            let ph = &p * h.transpose();
            let mut s = &h * &ph + model.measurement_covariance(estimate).to_dense();
            symmetrize(&mut s);
            let sf = SymMat::Full(s).factor()?;
            let gain_t = sf.solve_matrix(&ph.transpose());
            let mut next = &p - &ph * gain_t;
            symmetrize(&mut next);
            *cov = next;
        }
        Ok(())
    }
}

struct FlowProposal {
    x: DVector<f64>,
    log_q: f64,
}

fn flow_proposals(
    prev: &[DVector<f64>],
    eta0: &[DVector<f64>],
    k: usize,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
    flavor: FlowFlavor,
    p: &SymMat,
    central: &DVector<f64>,
    schedule: &FlowSchedule,
) -> Result<Vec<FlowProposal>> {
    let meas = ModelMeasurement(model);
    match flavor {
        FlowFlavor::Edh => {
            let mut map = compute_flow(central, p, z, &meas, schedule)?;
            map.materialize();
            Ok(prev
                .iter()
                .zip(eta0)
                .map(|(xp, e)| FlowProposal {
                    x: map.apply(e),
                    log_q: flow_proposal_log_density(&map, e, xp, model, k),
                })
                .collect())
        }
        FlowFlavor::Ledh => {
            let cache = if model.measurement_is_linear() && !p.is_diag() {
                Some(LinearFlowCache::new(p, z, &meas, schedule)?)
            } else {
                None
            };
            prev.par_iter()
                .zip(eta0.par_iter())
                .map(|(xp, e)| {
                    let start = model.predict_mean(k, xp);
                    let map = match &cache {
                        Some(c) => c.map_for(&start),
                        None => compute_flow(&start, p, z, &ModelMeasurement(model), schedule)?,
                    };
                    Ok(FlowProposal {
                        x: map.apply(e),
                        log_q: flow_proposal_log_density(&map, e, xp, model, k),
                    })
                })
                .collect()
        }
    }
}

/// Particle flow particle filter step: particles drawn from the dynamics are
/// moved by the invertible flow and weighted by
/// `p(x_k|x_{k-1}) p(z|x_k) / q(x_k)` with `q` from the flow's Jacobian.
pub fn pfpf_step(
    set: &mut WeightedParticleSet,
    k: usize,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
    flavor: FlowFlavor,
    schedule: &FlowSchedule,
    rng: &mut dyn RngCore,
) -> Result<ParticleStep> {
    pfpf_step_with(set, &mut PriorCovariance::Cloud, k, z, model, flavor, schedule, rng)
}

/// [`pfpf_step`] with an explicit source for the flow's prior covariance.
#[allow(clippy::too_many_arguments)]
pub fn pfpf_step_with(
    set: &mut WeightedParticleSet,
    cov: &mut PriorCovariance,
    k: usize,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
    flavor: FlowFlavor,
    schedule: &FlowSchedule,
    rng: &mut dyn RngCore,
) -> Result<ParticleStep> {
    let (central, p) = cov.predict(model, k, set);
    let eta0: Vec<DVector<f64>> = set.particles.iter().map(|x| model.sample_transition(k, x, rng)).collect();
    let props = flow_proposals(&set.particles, &eta0, k, z, model, flavor, &p, &central, schedule)?;
    let inc: Vec<f64> = set
        .particles
        .par_iter()
        .zip(props.par_iter())
        .map(|(xp, pr)| model.transition_log_density(k, &pr.x, xp) + model.log_likelihood(z, &pr.x) - pr.log_q)
        .collect();
    set.particles = props.into_iter().map(|p| p.x).collect();
    let step = finish_weighted(set, &inc, rng)?.0;
    cov.update(model, &p, &step.estimate)?;
    Ok(step)
}

/// Flow filter without importance weighting: particles drawn from the
/// dynamics are migrated by the flow and averaged.
pub fn flow_filter_step(
    set: &mut WeightedParticleSet,
    k: usize,
    z: &DVector<f64>,
    model: &dyn StateSpaceModel,
    flavor: FlowFlavor,
    schedule: &FlowSchedule,
    rng: &mut dyn RngCore,
) -> Result<ParticleStep> {
    let (central, p) = predictive_covariance(model, k, set);
    let eta0: Vec<DVector<f64>> = set.particles.iter().map(|x| model.sample_transition(k, x, rng)).collect();
    let props = flow_proposals(&set.particles, &eta0, k, z, model, flavor, &p, &central, schedule)?;
    *set = WeightedParticleSet::uniform(props.into_iter().map(|p| p.x).collect());
    Ok(ParticleStep {
        estimate: set.weighted_mean(),
        log_evidence_increment: None,
        ess: set.len() as f64,
        resampled: false,
    })
}

/// Particle set with latent process and measurement component labels.
#[derive(Clone, Debug)]
pub struct GmmParticleSet {
    pub set: WeightedParticleSet,
    pub process_labels: Vec<usize>,
    pub noise_labels: Vec<usize>,
}

impl GmmParticleSet {
    pub fn from_prior(model: &GmmModel, n: usize, rng: &mut dyn RngCore) -> Self {
        GmmParticleSet {
            set: WeightedParticleSet::from_prior(model, n, rng),
            process_labels: vec![0; n],
            noise_labels: vec![0; n],
        }
    }
}

/// PF-PF for Gaussian-mixture noise: labels are drawn from their prior
/// weights and each particle follows the LEDH flow of its component pair,
/// with prior covariance `spread + Q_m` as in [`pfpf_step`].
pub fn pfpf_gmm_step(
    gset: &mut GmmParticleSet,
    k: usize,
    z: &DVector<f64>,
    model: &GmmModel,
    schedule: &FlowSchedule,
    rng: &mut dyn RngCore,
) -> Result<ParticleStep> {
    let n = gset.set.len();
    let (_, spread) = gset.set.weighted_covariance_of(&|x| model.base_mean(k, x));
    let covs: Vec<SymMat> = (0..model.n_process_components())
        .map(|m| cloud_covariance(&spread, model.component_transition_cov(m)))
        .collect();
    let lp: Vec<f64> = (0..model.n_process_components()).map(|m| model.log_process_weight(m)).collect();
    let ln: Vec<f64> = (0..model.n_noise_components()).map(|c| model.log_noise_weight(c)).collect();
    let mut draws = Vec::with_capacity(n);
    for xp in &gset.set.particles {
        let m = sample_categorical(&lp, rng);
        let c = sample_categorical(&ln, rng);
        let eta0 = model.sample_component_transition(k, xp, m, rng);
        draws.push((m, c, eta0));
    }
    let results: Vec<(DVector<f64>, f64)> = gset
        .set
        .particles
        .par_iter()
        .zip(draws.par_iter())
        .map(|(xp, (m, c, eta0))| {
            let map: FlowMap = compute_gmm_conditioned_flow_with_covariance(k, xp, z, model, *m, *c, &covs[*m], schedule)?;
            let x = map.apply(eta0);
            let log_q = model.component_transition_log_density(k, eta0, xp, *m) - map.log_det();
            let lw = model.component_transition_log_density(k, &x, xp, *m) + model.component_log_likelihood(z, &x, *c) - log_q;
            Ok((x, lw))
        })
        .collect::<Result<_>>()?;
    gset.process_labels = draws.iter().map(|d| d.0).collect();
    gset.noise_labels = draws.iter().map(|d| d.1).collect();
    let inc: Vec<f64> = results.iter().map(|r| r.1).collect();
    gset.set.particles = results.into_iter().map(|r| r.0).collect();
    let (step, idx) = finish_weighted(&mut gset.set, &inc, rng)?;
    if let Some(idx) = idx {
        gset.process_labels = idx.iter().map(|&i| gset.process_labels[i]).collect();
        gset.noise_labels = idx.iter().map(|&i| gset.noise_labels[i]).collect();
    }
    Ok(step)
}
