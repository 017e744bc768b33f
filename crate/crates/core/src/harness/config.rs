use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{AdamConfig, MlpSpec};
use crate::objectives::{EstimatorKind, ObjectiveConfig, WeightingKind};
use crate::samplers::SamplerConfig;
use crate::schedules::{TimeMode, VsSchedule};
use crate::sde::{MultiBlockSdeSpec, VeSdeSpec};
use crate::tasks::{BaseDistribution, ForwardOperator};

/// Which estimator an experiment trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    /// Unconditional score on `x`; reconstructions ignore the observation.
    #[serde(rename = "dse")]
    Dse,
    #[serde(rename = "cde")]
    Cde,
    #[serde(rename = "cdiffe")]
    Cdiffe,
    #[serde(rename = "cmde")]
    Cmde,
    /// CMDE whose condition speed decays over training.
    #[serde(rename = "vs-cmde")]
    VsCmde,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Dse => "dse",
            Estimator::Cde => "cde",
            Estimator::Cdiffe => "cdiffe",
            Estimator::Cmde => "cmde",
            Estimator::VsCmde => "vs-cmde",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "dse" => Estimator::Dse,
            "cde" => Estimator::Cde,
            "cdiffe" => Estimator::Cdiffe,
            "cmde" => Estimator::Cmde,
            "vs-cmde" => Estimator::VsCmde,
            other => return Err(Error::Config(format!("unknown estimator {other:?}"))),
        })
    }

    pub fn kind(self) -> EstimatorKind {
        match self {
            Estimator::Dse => EstimatorKind::Dsm,
            Estimator::Cde => EstimatorKind::Cde,
            Estimator::Cdiffe => EstimatorKind::Cdiffe,
            Estimator::Cmde | Estimator::VsCmde => EstimatorKind::Cmde,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSourceKind {
    #[default]
    Network,
    /// Closed-form score of the task; no training.
    Oracle,
}

/// Diffusion of the two blocks. `sigma_y_max` is the condition's speed for
/// CMDE (and the schedule target for VS-CMDE).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MspecConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default)]
    pub sigma_y_max: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub time_mode: TimeMode,
    /// Iterations over which VS-CMDE decays the condition speed; defaults
    /// to the number of training steps.
    #[serde(default)]
    pub vs_iterations: Option<usize>,
    /// Starting condition speed for VS-CMDE; defaults to `mspec.sigma_max`.
    #[serde(default)]
    pub vs_sigma_max_initial: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_widths: Vec<usize>,
    #[serde(default = "time_features")]
    pub time_features: usize,
}

fn time_features() -> usize {
    8
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![128, 128, 128],
            time_features: time_features(),
        }
    }
}

/// Learning-rate profile over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to zero at the last step.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub ema_rate: f64,
    pub weighting: WeightingKind,
    pub lr_decay: LrDecay,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            steps: 2000,
            batch_size: 128,
            ema_rate: 0.999,
            weighting: WeightingKind::Mle,
            lr_decay: LrDecay::Constant,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_decay {
            LrDecay::Constant => self.lr,
            LrDecay::Cosine => {
                let frac = step as f64 / self.steps.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

fn default_n_eval() -> usize {
    5000
}

fn default_k() -> usize {
    5
}

fn default_data_range() -> f64 {
    1.0
}

/// Everything that determines an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: ForwardOperator,
    pub base: BaseDistribution,
    pub estimator: Estimator,
    #[serde(default)]
    pub score_source: ScoreSourceKind,
    pub mspec: MspecConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default = "default_k")]
    pub k_reconstructions: usize,
    /// Value range used by PSNR.
    #[serde(default = "default_data_range")]
    pub data_range: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg = Self::parse_unvalidated(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse without validating, for callers that apply overrides first.
    pub fn parse_unvalidated(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn n_x(&self) -> usize {
        self.base.dim()
    }

    pub fn n_y(&self) -> usize {
        self.task.output_dim(self.n_x())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate(self.n_x())?;
        self.schedule.time_mode.validate()?;
        if self.schedule.time_mode.horizon() != self.mspec.horizon {
            return Err(Error::Config("time mode and diffusion disagree on the horizon".into()));
        }
        self.sampler.validate(self.mspec.horizon)?;
        self.sampling_mspec()?;
        if let Some(s) = self.vs_schedule()? {
            s.validate()?;
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config("n_train and n_eval must be positive".into()));
        }
        if self.k_reconstructions < 2 {
            return Err(Error::Config("diversity needs at least two reconstructions".into()));
        }
        if !(self.data_range > 0.0) {
            return Err(Error::Config("data_range must be positive".into()));
        }
        if self.optimizer.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if matches!(self.estimator, Estimator::Cmde | Estimator::VsCmde)
            && self.mspec.sigma_y_max.is_none()
        {
            return Err(Error::Config(format!(
                "{} needs mspec.sigma_y_max",
                self.estimator.name()
            )));
        }
        self.network_spec()?.validate()
    }

    pub fn x_spec(&self) -> Result<VeSdeSpec> {
        VeSdeSpec::new(self.mspec.sigma_min, self.mspec.sigma_max, self.mspec.horizon)
    }

    /// Speed of the condition at sampling time (the schedule target for
    /// VS-CMDE). `None` for the unconditional estimator.
    pub fn sampling_y_spec(&self) -> Result<Option<VeSdeSpec>> {
        let x = self.x_spec()?;
        Ok(match self.estimator {
            Estimator::Dse => None,
            Estimator::Cde => Some(VeSdeSpec::frozen(x.sigma_min(), x.horizon())?),
            Estimator::Cdiffe => Some(x),
            Estimator::Cmde | Estimator::VsCmde => {
                let s = self
                    .mspec
                    .sigma_y_max
                    .ok_or_else(|| Error::Config("sigma_y_max is required".into()))?;
                Some(x.with_sigma_max(s)?)
            }
        })
    }

    pub fn sampling_mspec(&self) -> Result<MultiBlockSdeSpec> {
        let x = self.x_spec()?;
        match self.sampling_y_spec()? {
            None => MultiBlockSdeSpec::single(self.n_x(), x),
            Some(y) => MultiBlockSdeSpec::two_block(self.n_x(), x, self.n_y(), y),
        }
    }

    pub fn vs_schedule(&self) -> Result<Option<VsSchedule>> {
        if self.estimator != Estimator::VsCmde {
            return Ok(None);
        }
        let target = self
            .mspec
            .sigma_y_max
            .ok_or_else(|| Error::Config("sigma_y_max is required".into()))?;
        let initial = self.schedule.vs_sigma_max_initial.unwrap_or(self.mspec.sigma_max);
        let iterations = self.schedule.vs_iterations.unwrap_or(self.optimizer.steps.max(1));
        VsSchedule::new(iterations, initial, target).map(Some)
    }

    /// The diffusion used for training step `step`.
    pub fn training_mspec(&self, step: usize) -> Result<MultiBlockSdeSpec> {
        match self.vs_schedule()? {
            None => self.sampling_mspec(),
            Some(s) => {
                let x = self.x_spec()?;
                MultiBlockSdeSpec::two_block(self.n_x(), x, self.n_y(), s.y_spec_at(&x, step)?)
            }
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig::new(
            self.estimator.kind(),
            self.optimizer.weighting,
            self.schedule.time_mode,
        )
    }

    pub fn network_spec(&self) -> Result<MlpSpec> {
        let m = self.sampling_mspec()?;
        let obj = self.objective();
        Ok(MlpSpec {
            input_dim: obj.input_dim(&m),
            hidden_widths: self.network.hidden_widths.clone(),
            output_dim: obj.output_dim(&m),
            time_features: self.network.time_features,
        })
    }

    /// The value written to the `sigma_y_max` column.
    pub fn reported_sigma_y_max(&self) -> f64 {
        match self.sampling_y_spec() {
            Ok(Some(y)) => y.sigma_max(),
            _ => 0.0,
        }
    }
}

/// Inputs of the condition-noise error curve on a bivariate Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    pub rho: f64,
    pub t: f64,
    pub x_t: f64,
    pub y: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub horizon: f64,
    /// Ascending condition speeds; a value equal to `sigma_min` freezes `y`.
    pub grid: Vec<f64>,
    pub n_mc: usize,
    pub seed: u64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            rho: 0.8,
            t: 0.5,
            x_t: 1.0,
            y: 2.0,
            sigma_min: 0.01,
            sigma_max: 50.0,
            horizon: 1.0,
            grid: vec![0.01, 0.1, 0.5, 1.0, 5.0, 50.0],
            n_mc: 100_000,
            seed: 0,
        }
    }
}

impl CurveConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn run(&self) -> Result<Vec<crate::oracles::NoiseErrorPoint>> {
        let joint = crate::oracles::JointGaussianSpec::bivariate(self.rho)?;
        let x_spec = VeSdeSpec::new(self.sigma_min, self.sigma_max, self.horizon)?;
        crate::oracles::condition_noise_error_curve(
            &joint,
            &x_spec,
            self.t,
            &[self.x_t],
            &[self.y],
            &self.grid,
            self.n_mc,
            self.seed,
        )
    }
}
