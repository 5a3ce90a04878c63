//! Exact Daum–Huang particle flow integrated with Euler steps in pseudo-time,
//! composed into the invertible affine map `η₁ = C η₀ + D`.
//!
//! `C` is never formed unless asked for: each Euler factor `I + εA` with
//! `A = -½ P Hᵀ S⁻¹ H`, `S = λ H P Hᵀ + R`, is kept as Cholesky factors of `S`
//! and of `S' = (λ − ε/2) H P Hᵀ + R`, which give the forward product, the
//! Woodbury inverse `I + (ε/2) P Hᵀ S'⁻¹ H` and `det(I + εA) = det S' / det S`.
//! When `P`, `H` and `R` are all diagonal the whole map is diagonal.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{log_condition, Jacobian, SpdFactor, SymMat};
use crate::model::{GmmModel, StateSpaceModel};

/// Largest accepted natural-log condition number of `C` (in the metric of `P`).
pub const LOG_CONDITION_LIMIT: f64 = 12.0;

/// Pseudo-time grid: step sizes `ε_j > 0` summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSchedule {
    steps: Vec<f64>,
    lambdas: Vec<f64>,
}

impl FlowSchedule {
    /// `n` steps growing by `ratio`, smallest first; `ratio = 1` is uniform.
    pub fn geometric(n: usize, ratio: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Parameter("flow schedule needs at least one step".into()));
        }
        if ratio <= 0.0 || !ratio.is_finite() {
            return Err(Error::Parameter(format!("schedule ratio must be positive, got {ratio}")));
        }
        let raw: Vec<f64> = (0..n).map(|j| ratio.powi(j as i32)).collect();
        let total: f64 = raw.iter().sum();
        let steps: Vec<f64> = raw.iter().map(|r| r / total).collect();
        Self::from_steps(steps)
    }

    pub fn from_steps(steps: Vec<f64>) -> Result<Self> {
        if steps.is_empty() || steps.iter().any(|e| *e <= 0.0 || !e.is_finite()) {
            return Err(Error::Parameter("schedule steps must be positive".into()));
        }
        let total: f64 = steps.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!("schedule steps sum to {total}, not 1")));
        }
        let mut lambdas = Vec::with_capacity(steps.len());
        let mut acc = 0.0;
        for e in &steps {
            acc += e;
            lambdas.push(acc);
        }
        *lambdas.last_mut().expect("non-empty") = 1.0;
        Ok(FlowSchedule { steps, lambdas })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }
}

impl Default for FlowSchedule {
    fn default() -> Self {
        FlowSchedule::geometric(29, 1.2).expect("valid default schedule")
    }
}

/// Measurement model as seen by the flow: mean, Jacobian and (possibly
/// moment-matched) covariance at a linearization point.
pub trait FlowMeasurement {
    fn mean(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> Jacobian;
    fn covariance(&self, x: &DVector<f64>) -> SymMat;
    fn is_linear(&self) -> bool;
}

/// Flow measurement of a generic model.
pub struct ModelMeasurement<'a>(pub &'a dyn StateSpaceModel);

impl FlowMeasurement for ModelMeasurement<'_> {
    fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        self.0.measurement_mean(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Jacobian {
        self.0.measurement_jacobian(x)
    }
    fn covariance(&self, x: &DVector<f64>) -> SymMat {
        self.0.measurement_covariance(x)
    }
    fn is_linear(&self) -> bool {
        self.0.measurement_is_linear()
    }
}

/// Flow measurement conditioned on one measurement-noise component.
pub struct GmmComponentMeasurement<'a> {
    pub model: &'a GmmModel,
    pub component: usize,
}

impl FlowMeasurement for GmmComponentMeasurement<'_> {
    fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        self.model.component_measurement_mean(x, self.component)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Jacobian {
        self.model.base_measurement_jacobian(x)
    }
    fn covariance(&self, _x: &DVector<f64>) -> SymMat {
        self.model.component_measurement_cov(self.component).clone()
    }
    fn is_linear(&self) -> bool {
        self.model.measurement_is_linear()
    }
}

/// One Euler factor `I + εA` in factored form.
#[derive(Clone, Debug)]
struct DenseStep {
    eps: f64,
    h: Jacobian,
    s: SpdFactor,
    s_shift: SpdFactor,
}

#[derive(Clone, Debug)]
struct DenseSteps {
    p: SymMat,
    steps: Vec<DenseStep>,
}

impl DenseSteps {
    /// `A v = -½ P Hᵀ S⁻¹ H v` for one step.
    fn drift(p: &SymMat, h: &Jacobian, s: &SpdFactor, v: &DVector<f64>) -> DVector<f64> {
        p.mul_vec(&h.tr_mul_vec(&s.solve(&h.mul_vec(v)))) * -0.5
    }

    fn forward(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for st in &self.steps {
            out += Self::drift(&self.p, &st.h, &st.s, &out) * st.eps;
        }
        out
    }

    fn backward(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for st in self.steps.iter().rev() {
            // (I + εA)⁻¹ = I + (ε/2) P Hᵀ S'⁻¹ H
            out -= Self::drift(&self.p, &st.h, &st.s_shift, &out) * st.eps;
        }
        out
    }

    fn forward_matrix(&self) -> DMatrix<f64> {
        let d = self.p.dim();
        let mut c = DMatrix::identity(d, d);
        for st in &self.steps {
            let hc = match &st.h {
                Jacobian::Diag(hd) => {
                    let mut m = c.clone();
                    for (i, mut row) in m.row_iter_mut().enumerate() {
                        row *= hd[i];
                    }
                    m
                }
                Jacobian::Full(hm) => hm * &c,
            };
            let sol = st.s.solve_matrix(&hc);
            let ht = match &st.h {
                Jacobian::Diag(hd) => {
                    let mut m = sol;
                    for (i, mut row) in m.row_iter_mut().enumerate() {
                        row *= hd[i];
                    }
                    m
                }
                Jacobian::Full(hm) => hm.transpose() * sol,
            };
            let pht = match &self.p {
                SymMat::Diag(pd) => {
                    let mut m = ht;
                    for (i, mut row) in m.row_iter_mut().enumerate() {
                        row *= pd[i];
                    }
                    m
                }
                SymMat::Full(pm) => pm * ht,
            };
            c -= pht * (0.5 * st.eps);
        }
        c
    }
}

#[derive(Clone, Debug)]
struct DenseLinear {
    c: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

#[derive(Clone, Debug)]
enum LinearPart {
    Diag(DVector<f64>),
    Steps {
        steps: Arc<DenseSteps>,
        dense: Option<Arc<DenseLinear>>,
    },
}

/// Composed flow `η₁ = C η₀ + D` with `log|det C|` from the product formula.
#[derive(Clone, Debug)]
pub struct FlowMap {
    linear: LinearPart,
    offset: DVector<f64>,
    log_det: f64,
    aux_start: DVector<f64>,
    endpoint: DVector<f64>,
    trace: Option<FlowTrace>,
}

/// Per-step diagnostics: linearization point, `A(λ_j)` and `b(λ_j)`.
#[derive(Clone, Debug, Default)]
pub struct FlowTrace {
    pub points: Vec<DVector<f64>>,
    pub drifts: Vec<DMatrix<f64>>,
    pub offsets: Vec<DVector<f64>>,
}

impl FlowMap {
    pub fn identity(d: usize) -> Self {
        FlowMap {
            linear: LinearPart::Diag(DVector::from_element(d, 1.0)),
            offset: DVector::zeros(d),
            log_det: 0.0,
            aux_start: DVector::zeros(d),
            endpoint: DVector::zeros(d),
            trace: None,
        }
    }

    /// Scalar or diagonal map from explicit parts.
    pub fn diagonal(c: DVector<f64>, offset: DVector<f64>) -> Self {
        let log_det = c.iter().map(|v| v.abs().ln()).sum();
        let d = c.len();
        FlowMap {
            linear: LinearPart::Diag(c),
            offset,
            log_det,
            aux_start: DVector::zeros(d),
            endpoint: DVector::zeros(d),
            trace: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    /// `log|det C|` accumulated as `Σ_j log|det(I + ε_j A_j)|`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn aux_start(&self) -> &DVector<f64> {
        &self.aux_start
    }

    /// Migrated auxiliary point `η̄₁`.
    pub fn endpoint(&self) -> &DVector<f64> {
        &self.endpoint
    }

    pub fn trace(&self) -> Option<&FlowTrace> {
        self.trace.as_ref()
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.linear, LinearPart::Diag(_))
    }

    /// `C η₀ + D`.
    pub fn apply(&self, eta0: &DVector<f64>) -> DVector<f64> {
        self.apply_linear(eta0) + &self.offset
    }

    /// `C v`.
    pub fn apply_linear(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.linear {
            LinearPart::Diag(c) => c.component_mul(v),
            LinearPart::Steps { dense: Some(dl), .. } => &dl.c * v,
            LinearPart::Steps { steps, .. } => steps.forward(v),
        }
    }

    /// Solves `C η₀ = η₁ − D`.
    pub fn invert(&self, eta1: &DVector<f64>) -> DVector<f64> {
        let r = eta1 - &self.offset;
        match &self.linear {
            LinearPart::Diag(c) => r.component_div(c),
            LinearPart::Steps { dense: Some(dl), .. } => dl.lu.solve(&r).expect("flow map is invertible"),
            LinearPart::Steps { steps, .. } => steps.backward(&r),
        }
    }

    /// Dense `C`.
    pub fn linear_matrix(&self) -> DMatrix<f64> {
        match &self.linear {
            LinearPart::Diag(c) => DMatrix::from_diagonal(c),
            LinearPart::Steps { dense: Some(dl), .. } => dl.c.clone(),
            LinearPart::Steps { steps, .. } => steps.forward_matrix(),
        }
    }

    /// Forms `C` once and switches apply/invert to dense products and an LU
    /// solve; worthwhile for a map shared by many particles.
    pub fn materialize(&mut self) {
        if let LinearPart::Steps { steps, dense } = &mut self.linear {
            if dense.is_none() {
                let c = steps.forward_matrix();
                let lu = c.clone().lu();
                *dense = Some(Arc::new(DenseLinear { c, lu }));
            }
        }
    }

    /// Log-condition number of `C` measured in the metric of the prior
    /// covariance `P`, i.e. of `L⁻¹ C L` with `P = L Lᵀ`.
    pub fn whitened_log_condition(&self) -> f64 {
        match &self.linear {
            LinearPart::Diag(c) => {
                let max = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let min = c.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
                (max / min).ln()
            }
            LinearPart::Steps { steps, .. } => {
                let c = self.linear_matrix();
                match &steps.p {
                    SymMat::Diag(pd) => {
                        let mut w = c;
                        for j in 0..w.ncols() {
                            for i in 0..w.nrows() {
                                w[(i, j)] *= pd[j].sqrt() / pd[i].sqrt();
                            }
                        }
                        log_condition(&w)
                    }
                    SymMat::Full(pm) => match nalgebra::Cholesky::new(pm.clone()) {
                        Some(ch) => {
                            let l = ch.unpack();
                            let cl = &c * &l;
                            let w = l.solve_lower_triangular(&cl).expect("non-singular factor");
                            log_condition(&w)
                        }
                        None => log_condition(&c),
                    },
                }
            }
        }
    }

    /// Upper bound on the whitened log-condition from the schedule alone:
    /// each factor `I + εA` has eigenvalues in `(1 − ε/(2λ), 1]`.
    pub fn schedule_condition_bound(schedule: &FlowSchedule) -> f64 {
        schedule
            .steps()
            .iter()
            .zip(schedule.lambdas())
            .map(|(e, l)| -(1.0 - e / (2.0 * l)).ln())
            .sum()
    }
}

/// Applies `I + t A` where `A = -½ P Hᵀ S⁻¹ H` (dense) or `A = diag(a)`.
enum Drift<'a> {
    Diag(&'a DVector<f64>),
    Dense { p: &'a SymMat, h: &'a Jacobian, s: &'a SpdFactor },
}

impl Drift<'_> {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Drift::Diag(a) => a.component_mul(v),
            Drift::Dense { p, h, s } => DenseSteps::drift(p, h, s, v),
        }
    }

    fn shifted(&self, t: f64, v: &DVector<f64>) -> DVector<f64> {
        v + self.apply(v) * t
    }
}

fn all_diagonal(p: &SymMat, h: &Jacobian, r: &SymMat) -> bool {
    p.is_diag() && matches!(h, Jacobian::Diag(_)) && r.is_diag()
}

fn residual_term(p: &SymMat, h: &Jacobian, r: &SymMat, ztilde: &DVector<f64>) -> Result<DVector<f64>> {
    let rinv_z = match r {
        SymMat::Diag(rd) => ztilde.component_div(rd),
        SymMat::Full(_) => r.factor()?.solve(ztilde),
    };
    Ok(p.mul_vec(&h.tr_mul_vec(&rinv_z)))
}

/// `A(λ)` and `b(λ)` at linearization point `aux`; `aux_start` is the flow's
/// fixed starting auxiliary point entering `b`.
pub fn flow_step_params(
    aux: &DVector<f64>,
    aux_start: &DVector<f64>,
    p: &SymMat,
    z: &DVector<f64>,
    meas: &dyn FlowMeasurement,
    lambda: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Parameter(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    let h = meas.jacobian(aux);
    let r = meas.covariance(aux);
    let ztilde = z - meas.mean(aux) + h.mul_vec(aux);
    let s = h.sandwich(p).scale(lambda).add(&r);
    let sf = s
        .factor()
        .map_err(|e| Error::Numerical(format!("innovation matrix at lambda = {lambda}: {e}")))?;
    let drift = Drift::Dense { p, h: &h, s: &sf };
    let d = aux.len();
    let mut a = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut e = DVector::zeros(d);
        e[j] = 1.0;
        a.set_column(j, &drift.apply(&e));
    }
    let w = residual_term(p, &h, &r, &ztilde)?;
    let inner = drift.shifted(lambda, &w) + drift.apply(aux_start);
    let b = drift.shifted(2.0 * lambda, &inner);
    Ok((a, b))
}

/// Integrates the flow from `aux_start` through `schedule`, re-linearizing
/// the measurement at the migrating auxiliary point at every step.
pub fn compute_flow(
    aux_start: &DVector<f64>,
    p: &SymMat,
    z: &DVector<f64>,
    meas: &dyn FlowMeasurement,
    schedule: &FlowSchedule,
) -> Result<FlowMap> {
    integrate(aux_start, p, z, meas, schedule, false)
}

/// As [`compute_flow`] and also keeps `A(λ_j)`, `b(λ_j)` and the
/// linearization points.
pub fn compute_flow_traced(
    aux_start: &DVector<f64>,
    p: &SymMat,
    z: &DVector<f64>,
    meas: &dyn FlowMeasurement,
    schedule: &FlowSchedule,
) -> Result<FlowMap> {
    integrate(aux_start, p, z, meas, schedule, true)
}

fn integrate(
    aux_start: &DVector<f64>,
    p: &SymMat,
    z: &DVector<f64>,
    meas: &dyn FlowMeasurement,
    schedule: &FlowSchedule,
    record: bool,
) -> Result<FlowMap> {
    let d = aux_start.len();
    if p.dim() != d {
        return Err(Error::Input("prior covariance and auxiliary point dimensions differ".into()));
    }
    let mut aux = aux_start.clone();
    let mut offset = DVector::zeros(d);
    let mut log_det = 0.0;
    let mut trace = record.then(FlowTrace::default);
    let mut diag_c: Option<DVector<f64>> = None;
    let mut dense_steps: Vec<DenseStep> = Vec::with_capacity(schedule.len());
    let mut all_diag_so_far = true;

    for (&eps, &lambda) in schedule.steps().iter().zip(schedule.lambdas()) {
        let h = meas.jacobian(&aux);
        let r = meas.covariance(&aux);
        let ztilde = z - meas.mean(&aux) + h.mul_vec(&aux);
        let w = residual_term(p, &h, &r, &ztilde)?;

        if all_diagonal(p, &h, &r) && all_diag_so_far {
            let (SymMat::Diag(pd), Jacobian::Diag(hd), SymMat::Diag(rd)) = (p, &h, &r) else {
                unreachable!()
            };
            let a = DVector::from_fn(d, |i, _| {
                let hph = hd[i] * hd[i] * pd[i];
                -0.5 * hph / (lambda * hph + rd[i])
            });
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("singular innovation at lambda = {lambda}")));
            }
            let drift = Drift::Diag(&a);
            let inner = drift.shifted(lambda, &w) + drift.apply(aux_start);
            let b = drift.shifted(2.0 * lambda, &inner);
            let factor = a.map(|v| 1.0 + eps * v);
            log_det += factor.iter().map(|v| v.abs().ln()).sum::<f64>();
            aux = drift.shifted(eps, &aux) + &b * eps;
            offset = factor.component_mul(&offset) + &b * eps;
            diag_c = Some(match diag_c {
                Some(c) => c.component_mul(&factor),
                None => factor,
            });
            if let Some(t) = trace.as_mut() {
                t.points.push(aux.clone());
                t.drifts.push(DMatrix::from_diagonal(&a));
                t.offsets.push(b);
            }
            // O(d) factored copy, used only if a later step is not diagonal.
            let hph = h.sandwich(p);
            dense_steps.push(DenseStep {
                eps,
                s: hph.scale(lambda).add(&r).factor()?,
                s_shift: hph.scale(lambda - 0.5 * eps).add(&r).factor()?,
                h,
            });
            continue;
        }
        all_diag_so_far = false;
        diag_c = None;
        let hph = h.sandwich(p);
        let s = hph.scale(lambda).add(&r);
        let s_shift = hph.scale(lambda - 0.5 * eps).add(&r);
        let sf = s
            .factor()
            .map_err(|e| Error::Numerical(format!("innovation matrix at lambda = {lambda}: {e}")))?;
        let sf_shift = s_shift
            .factor()
            .map_err(|e| Error::Numerical(format!("shifted innovation at lambda = {lambda}: {e}")))?;
        let drift = Drift::Dense { p, h: &h, s: &sf };
        let inner = drift.shifted(lambda, &w) + drift.apply(aux_start);
        let b = drift.shifted(2.0 * lambda, &inner);
        log_det += sf_shift.log_det() - sf.log_det();
        aux = drift.shifted(eps, &aux) + &b * eps;
        offset = drift.shifted(eps, &offset) + &b * eps;
        if let Some(t) = trace.as_mut() {
            let mut a = DMatrix::zeros(d, d);
            for j in 0..d {
                let mut e = DVector::zeros(d);
                e[j] = 1.0;
                a.set_column(j, &drift.apply(&e));
            }
            t.points.push(aux.clone());
            t.drifts.push(a);
            t.offsets.push(b);
        }
        dense_steps.push(DenseStep {
            eps,
            h,
            s: sf,
            s_shift: sf_shift,
        });
    }

    if !log_det.is_finite() {
        return Err(Error::Numerical("flow determinant is not finite".into()));
    }
    let linear = match diag_c {
        Some(c) if all_diag_so_far => LinearPart::Diag(c),
        _ => LinearPart::Steps {
            steps: Arc::new(DenseSteps {
                p: p.clone(),
                steps: dense_steps,
            }),
            dense: None,
        },
    };
    let map = FlowMap {
        linear,
        offset,
        log_det,
        aux_start: aux_start.clone(),
        endpoint: aux,
        trace,
    };
    if map.is_diagonal() {
        let lc = map.whitened_log_condition();
        if lc > LOG_CONDITION_LIMIT || !lc.is_finite() {
            return Err(Error::FlowFailure {
                lambda: 1.0,
                log_condition: lc,
            });
        }
    }
    Ok(map)
}

/// `log q(η₁) = log p(η₀ | x_{k-1}) − log|det C|`.
pub fn flow_proposal_log_density(
    map: &FlowMap,
    eta0: &DVector<f64>,
    x_prev: &DVector<f64>,
    model: &dyn StateSpaceModel,
    k: usize,
) -> f64 {
    model.transition_log_density(k, eta0, x_prev) - map.log_det()
}

/// LEDH flow built from process component `m` and measurement component `n`:
/// starts at `f_k(x_{k-1}) + ψ_m` with prior covariance `Q_m`.
pub fn compute_gmm_conditioned_flow(
    k: usize,
    x_prev: &DVector<f64>,
    z: &DVector<f64>,
    model: &GmmModel,
    m: usize,
    n: usize,
    schedule: &FlowSchedule,
) -> Result<FlowMap> {
    if m >= model.n_process_components() {
        return Err(Error::Input(format!("process component {m} out of range")));
    }
    compute_gmm_conditioned_flow_with_covariance(k, x_prev, z, model, m, n, model.component_transition_cov(m), schedule)
}

/// As [`compute_gmm_conditioned_flow`] with an explicit prior covariance.
#[allow(clippy::too_many_arguments)]
pub fn compute_gmm_conditioned_flow_with_covariance(
    k: usize,
    x_prev: &DVector<f64>,
    z: &DVector<f64>,
    model: &GmmModel,
    m: usize,
    n: usize,
    p: &SymMat,
    schedule: &FlowSchedule,
) -> Result<FlowMap> {
    if m >= model.n_process_components() || n >= model.n_noise_components() {
        return Err(Error::Input(format!("component indices ({m}, {n}) out of range")));
    }
    let aux_start = model.component_transition_mean(k, x_prev, m);
    let meas = GmmComponentMeasurement { model, component: n };
    compute_flow(&aux_start, p, z, &meas, schedule)
}

/// Shared work for flows through an affine measurement with constant noise:
/// every factor `I + ε_j A_j` is common to all starting points and the map's
/// offset is affine in the start, `D(η̄₀) = D₀ + K η̄₀`.
#[derive(Clone, Debug)]
pub struct LinearFlowCache {
    steps: Arc<DenseSteps>,
    dense: Arc<DenseLinear>,
    base_offset: DVector<f64>,
    gain: DMatrix<f64>,
    log_det: f64,
}

impl LinearFlowCache {
    pub fn new(p: &SymMat, z: &DVector<f64>, meas: &dyn FlowMeasurement, schedule: &FlowSchedule) -> Result<Self> {
        if !meas.is_linear() {
            return Err(Error::Usage("flow cache requires an affine measurement".into()));
        }
        let d = p.dim();
        let origin = DVector::zeros(d);
        let h = meas.jacobian(&origin);
        let r = meas.covariance(&origin);
        let ztilde = z - meas.mean(&origin);
        let w = residual_term(p, &h, &r, &ztilde)?;
        let hph = h.sandwich(p);
        let mut steps = Vec::with_capacity(schedule.len());
        let mut base_offset = DVector::zeros(d);
        let mut gain = DMatrix::zeros(d, d);
        let mut log_det = 0.0;
        for (&eps, &lambda) in schedule.steps().iter().zip(schedule.lambdas()) {
            let sf = hph.scale(lambda).add(&r).factor()?;
            let sf_shift = hph.scale(lambda - 0.5 * eps).add(&r).factor()?;
            log_det += sf_shift.log_det() - sf.log_det();
            let drift = Drift::Dense { p, h: &h, s: &sf };
            let b0 = drift.shifted(2.0 * lambda, &drift.shifted(lambda, &w));
            base_offset = drift.shifted(eps, &base_offset) + b0 * eps;
            // gain ← (I + εA) gain + ε (I + 2λA) A, column by column
            for j in 0..d {
                let mut e = DVector::zeros(d);
                e[j] = 1.0;
                let col = gain.column(j).into_owned();
                let new = drift.shifted(eps, &col) + drift.shifted(2.0 * lambda, &drift.apply(&e)) * eps;
                gain.set_column(j, &new);
            }
            steps.push(DenseStep {
                eps,
                h: h.clone(),
                s: sf,
                s_shift: sf_shift,
            });
        }
        let steps = DenseSteps { p: p.clone(), steps };
        let c = steps.forward_matrix();
        let lu = c.clone().lu();
        Ok(LinearFlowCache {
            steps: Arc::new(steps),
            dense: Arc::new(DenseLinear { c, lu }),
            base_offset,
            gain,
            log_det,
        })
    }

    pub fn map_for(&self, aux_start: &DVector<f64>) -> FlowMap {
        let offset = &self.base_offset + &self.gain * aux_start;
        let endpoint = &self.dense.c * aux_start + &offset;
        FlowMap {
            linear: LinearPart::Steps {
                steps: self.steps.clone(),
                dense: Some(self.dense.clone()),
            },
            offset,
            log_det: self.log_det,
            aux_start: aux_start.clone(),
            endpoint,
            trace: None,
        }
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn whitened_log_condition(&self) -> f64 {
        self.map_for(&DVector::zeros(self.base_offset.len())).whitened_log_condition()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar {
        h: f64,
        r: f64,
    }

    impl FlowMeasurement for Scalar {
        fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
            x * self.h
        }
        fn jacobian(&self, x: &DVector<f64>) -> Jacobian {
            Jacobian::Diag(DVector::from_element(x.len(), self.h))
        }
        fn covariance(&self, x: &DVector<f64>) -> SymMat {
            SymMat::scaled_identity(x.len(), self.r)
        }
        fn is_linear(&self) -> bool {
            true
        }
    }

    #[test]
    fn schedule_sums_to_one() {
        let s = FlowSchedule::default();
        assert_eq!(s.len(), 29);
        assert!((s.steps().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.steps()[0] < s.steps()[28]);
        assert!(FlowSchedule::geometric(0, 1.2).is_err());
    }

    #[test]
    fn hand_evaluated_step_params() {
        let one = DVector::from_element(1, 0.0);
        let (a, b) = flow_step_params(&one, &one, &SymMat::identity(1), &DVector::from_element(1, 2.0), &Scalar { h: 1.0, r: 1.0 }, 1.0).unwrap();
        assert!((a[(0, 0)] + 0.25).abs() < 1e-15);
        assert!((b[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_measurement_gives_identity() {
        let x = DVector::from_vec(vec![0.3, -1.0]);
        let map = compute_flow(&x, &SymMat::identity(2), &DVector::from_element(2, 5.0), &Scalar { h: 0.0, r: 1.0 }, &FlowSchedule::default()).unwrap();
        assert_eq!(map.linear_matrix(), DMatrix::identity(2, 2));
        assert_eq!(map.offset(), &DVector::zeros(2));
        assert_eq!(map.log_det(), 0.0);
    }

    #[test]
    fn scalar_conjugate_case() {
        let z = DVector::from_element(1, 2.0);
        let map = compute_flow(&DVector::zeros(1), &SymMat::identity(1), &z, &Scalar { h: 1.0, r: 1.0 }, &FlowSchedule::default()).unwrap();
        let c = map.linear_matrix()[(0, 0)];
        assert!((c - 0.5f64.sqrt()).abs() < 0.01, "C = {c}");
        assert!((map.endpoint()[0] - 1.0).abs() < 0.02, "endpoint {}", map.endpoint()[0]);
    }

    #[test]
    fn scalar_inverse() {
        let map = FlowMap::diagonal(DVector::from_element(1, 0.5), DVector::from_element(1, 1.0));
        assert!((map.invert(&DVector::from_element(1, 2.0))[0] - 2.0).abs() < 1e-15);
        assert!((map.log_det() - 0.5f64.ln()).abs() < 1e-15);
    }
}
