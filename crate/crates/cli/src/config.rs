//! JSON experiment configuration.

use ncs_core::codec::{PriorRegistry, PRIOR_CLUSTERED, PRIOR_STANDARD_NORMAL, PRIOR_TWO_MODE};
use ncs_core::diffusion::{Component, Covariance, GaussianMixturePrior, Schedule};
use ncs_core::inverse::LinearOperator;
use ncs_core::ncs::{Fallback, SolverConfig, SolverKind};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    StandardNormal { dim: usize },
    TwoMode { dim: usize },
    Clustered { dim: usize },
    Mixture { components: Vec<ComponentSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic variance, or one variance per coordinate.
    pub variance: Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Variance {
    Isotropic(f64),
    Diagonal(Vec<f64>),
}

impl PriorSpec {
    pub fn build(&self) -> Result<GaussianMixturePrior, CliError> {
        let registry = PriorRegistry::builtin();
        let prior = match self {
            PriorSpec::StandardNormal { dim } => registry.resolve(PRIOR_STANDARD_NORMAL, *dim),
            PriorSpec::TwoMode { dim } => registry.resolve(PRIOR_TWO_MODE, *dim),
            PriorSpec::Clustered { dim } => registry.resolve(PRIOR_CLUSTERED, *dim),
            PriorSpec::Mixture { components } => GaussianMixturePrior::new(
                components
                    .iter()
                    .map(|c| Component {
                        weight: c.weight,
                        mean: c.mean.clone(),
                        covariance: match &c.variance {
                            Variance::Isotropic(v) => Covariance::isotropic(c.mean.len(), *v),
                            Variance::Diagonal(v) => Covariance::Diagonal(v.clone()),
                        },
                    })
                    .collect(),
            ),
        };
        prior.map_err(|e| CliError::Config(format!("prior: {e}")))
    }
}

/// Linear betas. With `reference_steps` set, both ends are multiplied by
/// `reference_steps / T` so that shorter chains cover the same noise range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default)]
    pub reference_steps: Option<usize>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { beta_min: 1e-4, beta_max: 0.02, reference_steps: Some(1000) }
    }
}

impl ScheduleSpec {
    pub fn build(&self, steps: usize) -> Result<Schedule, CliError> {
        let schedule = match self.reference_steps {
            Some(r) => Schedule::linear_rescaled(steps, self.beta_min, self.beta_max, r),
            None => Schedule::linear(steps, self.beta_min, self.beta_max),
        };
        schedule.map_err(|e| CliError::Config(format!("schedule: {e}")))
    }
}

fn default_sigma() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub operator: OperatorSpec,
    #[serde(default = "default_sigma")]
    pub sigma_obs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OperatorSpec {
    Preset(OperatorPreset),
    Explicit(LinearOperator),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorPreset {
    /// Keep the even coordinates.
    InpaintHalf,
    Denoise,
    /// Average pairs of neighbours.
    Downsample2,
    /// Circular `[1/4, 1/2, 1/4]` blur.
    Blur3,
}

impl OperatorSpec {
    pub fn build(&self, dim: usize) -> Result<LinearOperator, CliError> {
        let op = match self {
            OperatorSpec::Preset(OperatorPreset::InpaintHalf) => LinearOperator::mask(dim, (0..dim).step_by(2).collect()),
            OperatorSpec::Preset(OperatorPreset::Denoise) => Ok(LinearOperator::identity(dim)),
            OperatorSpec::Preset(OperatorPreset::Downsample2) => LinearOperator::downsample(dim, 2),
            OperatorSpec::Preset(OperatorPreset::Blur3) => LinearOperator::circular_blur(dim, vec![0.25, 0.5, 0.25]),
            OperatorSpec::Explicit(op) => op.validate().map(|_| op.clone()),
        };
        let op = op.map_err(|e| CliError::Config(format!("operator: {e}")))?;
        if op.input_dim() != dim {
            return Err(CliError::Config(format!("operator acts on {} coordinates, prior has {dim}", op.input_dim())));
        }
        Ok(op)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    List(Vec<u64>),
    Range { start: u64, count: u64 },
}

impl SeedSpec {
    pub fn expand(&self, offset: u64) -> Vec<u64> {
        match self {
            SeedSpec::List(v) => v.iter().map(|s| s.wrapping_add(offset)).collect(),
            SeedSpec::Range { start, count } => (0..*count).map(|i| start.wrapping_add(i).wrapping_add(offset)).collect(),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            SeedSpec::List(v) => v.is_empty(),
            SeedSpec::Range { count, .. } => *count == 0,
        }
    }
}

fn default_k() -> usize {
    64
}
fn default_zeta() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    0.1
}
fn default_range() -> f64 {
    2.0
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub prior: PriorSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    #[serde(default)]
    pub solvers: Vec<SolverKind>,
    pub steps: Vec<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub fallback: Fallback,
    pub seeds: SeedSpec,
    #[serde(default = "default_range")]
    pub psnr_range: f64,
    /// When false, `wall_ms` is written as 0 so output bytes depend only on the config.
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
    #[serde(default)]
    pub output: Option<String>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds: at least one seed is required".into()));
        }
        if self.steps.is_empty() || self.steps.contains(&0) {
            return Err(CliError::Config("steps: need at least one T >= 1".into()));
        }
        if self.psnr_range.is_nan() || self.psnr_range <= 0.0 {
            return Err(CliError::Config("psnr_range must be positive".into()));
        }
        let prior = self.prior.build()?;
        for &t in &self.steps {
            self.schedule.build(t)?;
        }
        if let Some(task) = &self.task {
            task.operator.build(prior.dim())?;
            if task.sigma_obs.is_nan() || task.sigma_obs < 0.0 {
                return Err(CliError::Config("task.sigma_obs must be nonnegative".into()));
            }
        }
        for &solver in &self.solvers {
            self.solver_config(solver, 0).validate().map_err(|e| CliError::Config(format!("{solver}: {e}")))?;
        }
        Ok(())
    }

    pub fn solver_config(&self, solver: SolverKind, seed: u64) -> SolverConfig {
        let mut cfg = SolverConfig::new(solver, seed);
        cfg.k = self.k;
        cfg.m = self.m;
        cfg.zeta = self.zeta;
        cfg.lambda = self.lambda;
        cfg.fallback = self.fallback;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_bench_m")]
    pub m: Vec<usize>,
    #[serde(default = "default_bench_c")]
    pub c: Vec<u8>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub budget: u128,
}

fn default_bench_m() -> Vec<usize> {
    vec![2, 4, 8, 16, 32]
}
fn default_bench_c() -> Vec<u8> {
    vec![1, 2, 3, 4]
}
fn default_batch() -> usize {
    64
}
fn default_budget() -> u128 {
    1 << 20
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { m: default_bench_m(), c: default_bench_c(), batch: default_batch(), seed: 0, budget: default_budget() }
    }
}

impl BenchConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if config.m.contains(&0) || config.batch == 0 {
            return Err(CliError::Config("m values and batch must be at least 1".into()));
        }
        if let Some(&c) = config.c.iter().find(|&&c| c > ncs_core::quantizer::MAX_BITS) {
            return Err(CliError::Config(format!("C = {c} exceeds {}", ncs_core::quantizer::MAX_BITS)));
        }
        Ok(config)
    }
}
