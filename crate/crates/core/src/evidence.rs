//! Normalizing-constant estimates from joint-draw importance weights, the
//! Kalman-filter reference and the relative log-Z error metric.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{kalman_step, GaussianBelief};
use crate::linalg::log_sum_exp;
use crate::model::StateSpaceModel;

/// `log w = log p(x|x_{k-1}) + log p(z|x) − log q(x)`.
pub fn importance_log_weight(log_transition: f64, log_likelihood: f64, log_proposal: f64) -> f64 {
    log_transition + log_likelihood - log_proposal
}

/// `log( (1/N) Σ exp(log_weights) )`.
pub fn evidence_increment(log_weights: &[f64]) -> Result<f64> {
    if log_weights.is_empty() {
        return Err(Error::State("evidence increment needs at least one weight".into()));
    }
    let v = log_sum_exp(log_weights) - (log_weights.len() as f64).ln();
    if v.is_nan() {
        return Err(Error::Numerical("evidence increment is undefined".into()));
    }
    Ok(v)
}

/// Per-step log-evidence increments and their running sum.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvidenceLedger {
    increments: Vec<f64>,
    cumulative: Vec<f64>,
}

/// One row of the evidence CSV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRow {
    pub step: usize,
    pub log_increment: f64,
    pub cum_log_z: f64,
}

impl EvidenceLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, log_increment: f64) {
        let prev = self.cumulative.last().copied().unwrap_or(0.0);
        self.increments.push(log_increment);
        self.cumulative.push(prev + log_increment);
    }

    /// Adds the increment estimated from `log_weights`.
    pub fn push_weights(&mut self, log_weights: &[f64]) -> Result<f64> {
        let inc = evidence_increment(log_weights)?;
        self.push(inc);
        Ok(inc)
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `log Ẑ_k` for `k = 1..T`.
    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn log_z(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    pub fn rows(&self) -> Vec<EvidenceRow> {
        self.increments
            .iter()
            .zip(&self.cumulative)
            .enumerate()
            .map(|(i, (inc, cum))| EvidenceRow {
                step: i + 1,
                log_increment: *inc,
                cum_log_z: *cum,
            })
            .collect()
    }
}

/// Exact per-step `log p(z_k | z_{1:k-1})` from the Kalman filter.
pub fn kf_log_evidence(model: &dyn StateSpaceModel, measurements: &[DVector<f64>]) -> Result<Vec<f64>> {
    if model.linear_gaussian().is_none() {
        return Err(Error::Usage("exact evidence requires a linear-Gaussian model".into()));
    }
    let mut belief = GaussianBelief::from_model_prior(model);
    let mut out = Vec::with_capacity(measurements.len());
    for z in measurements {
        let (next, inc) = kalman_step(&belief, z, model)?;
        out.push(inc);
        belief = next;
    }
    Ok(out)
}

/// Running sums of increments.
pub fn cumulative_sum(increments: &[f64]) -> Vec<f64> {
    increments
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

/// `Σ (log Z_k − log Ẑ_k)² / Σ (log Z_k)²` over cumulative log-evidences.
pub fn relative_logz_mse(estimates: &[f64], truth: &[f64]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::Input(format!(
            "estimate length {} differs from truth length {}",
            estimates.len(),
            truth.len()
        )));
    }
    let den: f64 = truth.iter().map(|t| t * t).sum();
    if den == 0.0 || !den.is_finite() {
        return Err(Error::Metric("relative log-Z error needs a nonzero reference".into()));
    }
    let num: f64 = estimates.iter().zip(truth).map(|(e, t)| (t - e) * (t - e)).sum();
    Ok(num / den)
}

/// `log sup_x p(z | x)` for a linear-Gaussian likelihood (weighted least
/// squares residual).
pub fn log_likelihood_bound(model: &dyn StateSpaceModel, z: &DVector<f64>) -> Result<f64> {
    let lg = model
        .linear_gaussian()
        .ok_or_else(|| Error::Usage("likelihood bound requires a linear-Gaussian model".into()))?;
    let r = lg.measurement_cov.factor()?;
    let wz = r.whiten(z);
    let wh = nalgebra::DMatrix::from_columns(
        &lg.observation
            .column_iter()
            .map(|c| r.whiten(&c.into_owned()))
            .collect::<Vec<_>>(),
    );
    let svd = wh.clone().svd(true, true);
    let x = svd
        .solve(&wz, 1e-12)
        .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))?;
    let resid = &wz - &wh * x;
    let s = z.len() as f64;
    Ok(-0.5 * resid.norm_squared() - 0.5 * (s * (2.0 * std::f64::consts::PI).ln() + r.log_det()))
}

/// Number of log-weights above `log_bound` (with a relative slack for
/// rounding).
pub fn audit_weight_bound(log_weights: &[f64], log_bound: f64) -> usize {
    let slack = 1e-9 * log_bound.abs().max(1.0);
    log_weights.iter().filter(|w| **w > log_bound + slack).count()
}
