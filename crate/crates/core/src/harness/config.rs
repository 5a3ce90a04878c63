//! Flat key-value experiment configuration, filter rosters and presets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowSchedule;
use crate::linalg::SymMat;
use crate::mhmc::{MetricMode, MhmcConfig};
use crate::model::{
    build_dispersion_matrix, build_linear_gaussian_model, grid_locations, GmmModel, LinearGaussianModel, PoissonCounts,
    SpatialSensorModel, StateSpaceModel,
};
use crate::smcmc::SmcmcConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Spatial,
    Gmm,
}

/// Where the ground-truth trajectory starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthStart {
    Zero,
    Prior,
}

/// Source of the PF-PF flow covariance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PfpfCovariance {
    Ekf,
    Cloud,
}

/// Per-step squared error: averaged over components or summed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MseConvention {
    PerComponent,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FilterKind {
    Kf,
    Ekf,
    Ukf,
    Bpf,
    Edh,
    Ledh,
    PfpfEdh,
    PfpfLedh,
    PfpfGmm,
    SmcmcPrior,
    SmcmcEdh,
    SmcmcLedh,
    SmcmcGmm,
    SmcmcGmmLedh,
}

impl FilterKind {
    pub const ALL: [FilterKind; 14] = [
        FilterKind::Kf,
        FilterKind::Ekf,
        FilterKind::Ukf,
        FilterKind::Bpf,
        FilterKind::Edh,
        FilterKind::Ledh,
        FilterKind::PfpfEdh,
        FilterKind::PfpfLedh,
        FilterKind::PfpfGmm,
        FilterKind::SmcmcPrior,
        FilterKind::SmcmcEdh,
        FilterKind::SmcmcLedh,
        FilterKind::SmcmcGmm,
        FilterKind::SmcmcGmmLedh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Kf => "kf",
            FilterKind::Ekf => "ekf",
            FilterKind::Ukf => "ukf",
            FilterKind::Bpf => "bpf",
            FilterKind::Edh => "edh",
            FilterKind::Ledh => "ledh",
            FilterKind::PfpfEdh => "pfpf-edh",
            FilterKind::PfpfLedh => "pfpf-ledh",
            FilterKind::PfpfGmm => "pfpf-gmm",
            FilterKind::SmcmcPrior => "smcmc-prior",
            FilterKind::SmcmcEdh => "smcmc-edh",
            FilterKind::SmcmcLedh => "smcmc-ledh",
            FilterKind::SmcmcGmm => "smcmc-gmm",
            FilterKind::SmcmcGmmLedh => "smcmc-gmm-ledh",
        }
    }

    /// Gaussian filters carry no particle count.
    pub fn uses_particles(self) -> bool {
        !matches!(self, FilterKind::Kf | FilterKind::Ekf | FilterKind::Ukf)
    }

    pub fn is_smcmc(self) -> bool {
        matches!(
            self,
            FilterKind::SmcmcPrior | FilterKind::SmcmcEdh | FilterKind::SmcmcLedh | FilterKind::SmcmcGmm | FilterKind::SmcmcGmmLedh
        )
    }

    /// Filters that produce evidence increments.
    pub fn estimates_evidence(self) -> bool {
        self == FilterKind::Kf || self.is_smcmc() || matches!(self, FilterKind::Bpf | FilterKind::PfpfEdh | FilterKind::PfpfLedh | FilterKind::PfpfGmm)
    }

    fn needs_gmm(self) -> bool {
        matches!(self, FilterKind::PfpfGmm | FilterKind::SmcmcGmm | FilterKind::SmcmcGmmLedh)
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown filter '{s}'")))
    }
}

/// One roster entry, written `name` or `name:particles` (e.g. `smcmc-edh:200`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub n_particles: Option<usize>,
}

impl FilterSpec {
    pub fn new(kind: FilterKind, n_particles: Option<usize>) -> Self {
        FilterSpec { kind, n_particles }
    }

    pub fn particles(&self) -> usize {
        self.n_particles.unwrap_or(0)
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.n_particles {
            Some(n) => write!(f, "{}:{}", self.kind.name(), n),
            None => f.write_str(self.kind.name()),
        }
    }
}

impl FromStr for FilterSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, count) = match s.split_once(':') {
            Some((n, c)) => (n.trim(), Some(c.trim())),
            None => (s.trim(), None),
        };
        let kind: FilterKind = name.parse()?;
        let n_particles = match count {
            Some(c) => Some(
                c.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad particle count in '{s}'")))?,
            ),
            None => None,
        };
        match (kind.uses_particles(), n_particles) {
            (true, None) => Err(Error::Config(format!("filter '{name}' needs a particle count, e.g. '{name}:200'"))),
            (true, Some(0)) => Err(Error::Config(format!("filter '{s}' needs at least one particle"))),
            (false, Some(_)) => Err(Error::Config(format!("filter '{name}' takes no particle count"))),
            _ => Ok(FilterSpec { kind, n_particles }),
        }
    }
}

fn default_true() -> bool {
    true
}

/// Experiment description. Serialized as a flat TOML table: every key is a
/// scalar or an array, no sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelKind,
    pub dim: usize,
    pub time_steps: usize,
    pub trials: usize,
    pub seed: u64,
    /// Roster entries such as `"kf"` or `"smcmc-ledh:200"`.
    pub filters: Vec<String>,

    // dynamics shared by the linear and spatial models
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::alpha0")]
    pub alpha0: f64,
    #[serde(default = "defaults::alpha1")]
    pub alpha1: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::sigma_z")]
    pub sigma_z: f64,
    #[serde(default = "defaults::nu")]
    pub nu: f64,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::m1")]
    pub m1: f64,
    #[serde(default = "defaults::m2")]
    pub m2: f64,

    #[serde(default = "defaults::process_means")]
    pub gmm_process_means: Vec<f64>,
    #[serde(default = "defaults::sigma_v")]
    pub gmm_sigma_v: f64,
    #[serde(default = "defaults::noise_means")]
    pub gmm_noise_means: Vec<f64>,
    #[serde(default = "defaults::sigma_w")]
    pub gmm_sigma_w: f64,

    #[serde(default = "defaults::truth_start")]
    pub truth_start: TruthStart,

    #[serde(default = "defaults::n_burnin")]
    pub n_burnin: usize,
    #[serde(default = "default_true")]
    pub refine_history: bool,
    #[serde(default = "default_true")]
    pub refine_current: bool,
    #[serde(default = "defaults::mhmc_scale")]
    pub mhmc_scale: f64,
    #[serde(default = "defaults::mhmc_metric")]
    pub mhmc_metric: MetricMode,
    #[serde(default = "defaults::mhmc_leapfrog")]
    pub mhmc_leapfrog: usize,
    #[serde(default = "defaults::mhmc_fixed_point_iters")]
    pub mhmc_fixed_point_iters: usize,
    #[serde(default)]
    pub mhmc_jitter: f64,
    #[serde(default = "defaults::flow_steps")]
    pub flow_steps: usize,
    #[serde(default = "defaults::flow_ratio")]
    pub flow_ratio: f64,
    #[serde(default)]
    pub include_burnin: bool,
    #[serde(default = "defaults::pfpf_covariance")]
    pub pfpf_covariance: PfpfCovariance,

    #[serde(default = "defaults::mse_convention")]
    pub mse_convention: MseConvention,
    /// When false, wall-clock columns are written as 0 so that repeated runs
    /// produce byte-identical files.
    #[serde(default = "default_true")]
    pub timing: bool,
    /// Write per-step point estimates into the detail file.
    #[serde(default)]
    pub detail_estimates: bool,
}

mod defaults {
    use super::{MseConvention, PfpfCovariance, TruthStart};
    use crate::mhmc::MetricMode;

    pub fn alpha() -> f64 {
        0.9
    }
    pub fn alpha0() -> f64 {
        3.0
    }
    pub fn alpha1() -> f64 {
        0.01
    }
    pub fn beta() -> f64 {
        20.0
    }
    pub fn sigma_z() -> f64 {
        0.5
    }
    pub fn nu() -> f64 {
        7.0
    }
    pub fn gamma() -> f64 {
        0.3
    }
    pub fn m1() -> f64 {
        1.0
    }
    pub fn m2() -> f64 {
        1.0 / 3.0
    }
    pub fn process_means() -> Vec<f64> {
        vec![-1.0, 0.0, 1.0]
    }
    pub fn sigma_v() -> f64 {
        0.5
    }
    pub fn noise_means() -> Vec<f64> {
        vec![-3.0, 0.0, 3.0]
    }
    pub fn sigma_w() -> f64 {
        0.1
    }
    pub fn truth_start() -> TruthStart {
        TruthStart::Zero
    }
    pub fn n_burnin() -> usize {
        20
    }
    pub fn mhmc_scale() -> f64 {
        1.5
    }
    pub fn mhmc_metric() -> MetricMode {
        MetricMode::Constant
    }
    pub fn mhmc_leapfrog() -> usize {
        20
    }
    pub fn mhmc_fixed_point_iters() -> usize {
        30
    }
    pub fn flow_steps() -> usize {
        29
    }
    pub fn flow_ratio() -> f64 {
        1.2
    }
    pub fn pfpf_covariance() -> PfpfCovariance {
        PfpfCovariance::Ekf
    }
    pub fn mse_convention() -> MseConvention {
        MseConvention::PerComponent
    }
}

/// A constructed benchmark model.
#[derive(Clone, Debug)]
pub enum BuiltModel {
    Linear(LinearGaussianModel),
    Spatial(SpatialSensorModel),
    Gmm(GmmModel),
}

impl BuiltModel {
    pub fn as_dyn(&self) -> &dyn StateSpaceModel {
        match self {
            BuiltModel::Linear(m) => m,
            BuiltModel::Spatial(m) => m,
            BuiltModel::Gmm(m) => m,
        }
    }

    pub fn as_gmm(&self) -> Option<&GmmModel> {
        match self {
            BuiltModel::Gmm(m) => Some(m),
            _ => None,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for every optional key; the roster is empty.
    pub fn new(name: &str, model: ModelKind, dim: usize, time_steps: usize, trials: usize) -> Self {
        ExperimentConfig {
            name: name.to_string(),
            model,
            dim,
            time_steps,
            trials,
            seed: 1,
            filters: Vec::new(),
            alpha: defaults::alpha(),
            alpha0: defaults::alpha0(),
            alpha1: defaults::alpha1(),
            beta: defaults::beta(),
            sigma_z: defaults::sigma_z(),
            nu: defaults::nu(),
            gamma: defaults::gamma(),
            m1: defaults::m1(),
            m2: defaults::m2(),
            gmm_process_means: defaults::process_means(),
            gmm_sigma_v: defaults::sigma_v(),
            gmm_noise_means: defaults::noise_means(),
            gmm_sigma_w: defaults::sigma_w(),
            truth_start: defaults::truth_start(),
            n_burnin: defaults::n_burnin(),
            refine_history: true,
            refine_current: true,
            mhmc_scale: defaults::mhmc_scale(),
            mhmc_metric: defaults::mhmc_metric(),
            mhmc_leapfrog: defaults::mhmc_leapfrog(),
            mhmc_fixed_point_iters: defaults::mhmc_fixed_point_iters(),
            mhmc_jitter: 0.0,
            flow_steps: defaults::flow_steps(),
            flow_ratio: defaults::flow_ratio(),
            include_burnin: false,
            pfpf_covariance: defaults::pfpf_covariance(),
            mse_convention: defaults::mse_convention(),
            timing: true,
            detail_estimates: false,
        }
    }

    pub fn with_filters(mut self, filters: &[&str]) -> Self {
        self.filters = filters.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn roster(&self) -> Result<Vec<FilterSpec>> {
        let specs: Vec<FilterSpec> = self.filters.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        for (i, a) in specs.iter().enumerate() {
            if specs[..i].contains(a) {
                return Err(Error::Config(format!("filter '{a}' listed twice")));
            }
        }
        Ok(specs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.time_steps == 0 {
            return Err(Error::Config("dim and time_steps must be positive".into()));
        }
        for spec in self.roster()? {
            if spec.kind.needs_gmm() && self.model != ModelKind::Gmm {
                return Err(Error::Config(format!("filter '{spec}' requires the gmm model")));
            }
            if spec.kind == FilterKind::Kf && self.model != ModelKind::Linear {
                return Err(Error::Config("filter 'kf' requires the linear model".into()));
            }
        }
        if self.flow_steps == 0 || !(self.flow_ratio > 0.0) {
            return Err(Error::Config("flow_steps must be positive and flow_ratio > 0".into()));
        }
        if self.model == ModelKind::Spatial {
            let side = (self.dim as f64).sqrt().round() as usize;
            if side * side != self.dim {
                return Err(Error::Config(format!("spatial dim {} is not a perfect square", self.dim)));
            }
        }
        self.mhmc().validate()
    }

    pub fn schedule(&self) -> Result<FlowSchedule> {
        FlowSchedule::geometric(self.flow_steps, self.flow_ratio)
    }

    pub fn mhmc(&self) -> MhmcConfig {
        MhmcConfig {
            n_leapfrog: self.mhmc_leapfrog,
            fixed_point_iters: self.mhmc_fixed_point_iters,
            step_jitter: self.mhmc_jitter,
            ..MhmcConfig::for_dim(self.dim, self.mhmc_scale, self.mhmc_metric)
        }
    }

    pub fn smcmc(&self, n_particles: usize) -> Result<SmcmcConfig> {
        Ok(SmcmcConfig {
            n_particles,
            n_burnin: self.n_burnin,
            refine_history: self.refine_history,
            refine_current: self.refine_current,
            mhmc: self.mhmc(),
            schedule: self.schedule()?,
        })
    }

    pub fn build_model(&self) -> Result<BuiltModel> {
        let d = self.dim;
        Ok(match self.model {
            ModelKind::Linear => {
                let sigma = build_dispersion_matrix(&grid_locations(d)?, self.alpha0, self.alpha1, self.beta)?;
                BuiltModel::Linear(build_linear_gaussian_model(d, self.alpha, SymMat::Full(sigma), self.sigma_z)?)
            }
            ModelKind::Spatial => BuiltModel::Spatial(SpatialSensorModel::on_grid(
                d,
                self.alpha,
                self.nu,
                self.gamma,
                self.alpha0,
                self.alpha1,
                self.beta,
                PoissonCounts { m1: self.m1, m2: self.m2 },
            )?),
            ModelKind::Gmm => BuiltModel::Gmm(GmmModel::benchmark(
                d,
                &self.gmm_process_means,
                self.gmm_sigma_v,
                &self.gmm_noise_means,
                self.gmm_sigma_w,
            )?),
        })
    }
}

/// A named, shipped configuration.
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    build: fn() -> ExperimentConfig,
}

impl Preset {
    pub fn config(&self) -> ExperimentConfig {
        (self.build)()
    }
}

fn linear(name: &str, trials: usize, big_pfpf: usize, big_bpf: usize) -> ExperimentConfig {
    let pfpf_big = format!("pfpf-edh:{big_pfpf}");
    let bpf_big = format!("bpf:{big_bpf}");
    ExperimentConfig::new(name, ModelKind::Linear, 64, 10, trials).with_filters(&[
        "kf",
        "smcmc-ledh:200",
        "smcmc-edh:200",
        "smcmc-prior:200",
        "pfpf-ledh:200",
        "pfpf-edh:200",
        &pfpf_big,
        "bpf:200",
        &bpf_big,
    ])
}

fn spatial(name: &str, d: usize, trials: usize, big_edh: usize, big_pfpf: usize, big_bpf: usize) -> ExperimentConfig {
    let edh_big = format!("edh:{big_edh}");
    let pfpf_big = format!("pfpf-edh:{big_pfpf}");
    let bpf_big = format!("bpf:{big_bpf}");
    ExperimentConfig::new(name, ModelKind::Spatial, d, 10, trials).with_filters(&[
        "smcmc-edh:200",
        "smcmc-ledh:200",
        "smcmc-prior:200",
        "edh:200",
        &edh_big,
        "ledh:200",
        "pfpf-edh:200",
        &pfpf_big,
        "ekf",
        "ukf",
        &bpf_big,
    ])
}

fn gmm(name: &str, d: usize, trials: usize, big_pfpf: usize, big_bpf: usize) -> ExperimentConfig {
    let pfpf_big = format!("pfpf-edh:{big_pfpf}");
    let bpf_big = format!("bpf:{big_bpf}");
    let mut cfg = ExperimentConfig::new(name, ModelKind::Gmm, d, 50, trials).with_filters(&[
        "smcmc-gmm-ledh:100",
        "smcmc-gmm:100",
        "pfpf-gmm:200",
        "ukf",
        "ledh:500",
        "edh:500",
        "pfpf-ledh:500",
        &pfpf_big,
        &bpf_big,
    ]);
    cfg.mhmc_metric = MetricMode::PositionDependent;
    cfg.mhmc_scale = 1.75;
    cfg.mhmc_jitter = 0.9;
    cfg
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "linear-d64",
        description: "linear Gaussian d=64, 100 trials, evidence benchmark roster",
        build: || linear("linear-d64", 100, 10_000, 1_000_000),
    },
    Preset {
        name: "linear-d64-desk",
        description: "linear Gaussian d=64, 25 trials, reduced large-N baselines",
        build: || linear("linear-d64-desk", 25, 10_000, 100_000),
    },
    Preset {
        name: "spatial-d144",
        description: "spatial sensor network d=144, 100 trials",
        build: || spatial("spatial-d144", 144, 100, 10_000, 100_000, 1_000_000),
    },
    Preset {
        name: "spatial-d400",
        description: "spatial sensor network d=400, 100 trials",
        build: || spatial("spatial-d400", 400, 100, 10_000, 100_000, 1_000_000),
    },
    Preset {
        name: "spatial-d36-desk",
        description: "spatial sensor network d=36, 10 trials",
        build: || spatial("spatial-d36-desk", 36, 10, 10_000, 10_000, 100_000),
    },
    Preset {
        name: "spatial-d144-desk",
        description: "spatial sensor network d=144, 10 trials, reduced large-N baselines",
        build: || spatial("spatial-d144-desk", 144, 10, 10_000, 10_000, 100_000),
    },
    Preset {
        name: "gmm-d144",
        description: "GMM-noise nonlinear model d=144, 100 trials, T=50",
        build: || gmm("gmm-d144", 144, 100, 100_000, 1_000_000),
    },
    Preset {
        name: "gmm-d400",
        description: "GMM-noise nonlinear model d=400, 100 trials, T=50",
        build: || gmm("gmm-d400", 400, 100, 100_000, 1_000_000),
    },
    Preset {
        name: "gmm-d36-desk",
        description: "GMM-noise nonlinear model d=36, 10 trials, T=50",
        build: || gmm("gmm-d36-desk", 36, 10, 10_000, 100_000),
    },
    Preset {
        name: "gmm-d144-desk",
        description: "GMM-noise nonlinear model d=144, 10 trials, T=50, reduced large-N baselines",
        build: || gmm("gmm-d144-desk", 144, 10, 10_000, 100_000),
    },
];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .map(Preset::config)
        .ok_or_else(|| Error::Config(format!("unknown preset '{name}'")))
}
