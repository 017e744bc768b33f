//! Training-time distributions over `t` and the variance-reduction schedule
//! for the condition's diffusion speed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sde::{VeSdeSpec, DEFAULT_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeMode {
    /// Uniform on `[eps, horizon]`.
    Continuous { eps: f64, horizon: f64 },
    /// Uniform over `{eps, T/N, 2T/N, …, T}`.
    Discrete { n: usize, eps: f64, horizon: f64 },
}

impl Default for TimeMode {
    fn default() -> Self {
        TimeMode::Continuous {
            eps: DEFAULT_EPS,
            horizon: 1.0,
        }
    }
}

impl TimeMode {
    pub fn discrete_default() -> Self {
        TimeMode::Discrete {
            n: 1000,
            eps: DEFAULT_EPS,
            horizon: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (eps, horizon) = match *self {
            TimeMode::Continuous { eps, horizon } => (eps, horizon),
            TimeMode::Discrete { n, eps, horizon } => {
                if n == 0 {
                    return Err(Error::Config("discrete time grid needs N >= 1".into()));
                }
                (eps, horizon)
            }
        };
        if !(eps > 0.0 && eps < horizon) {
            return Err(Error::Config(format!(
                "time cutoff must satisfy 0 < eps < T (eps={eps}, T={horizon})"
            )));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        match *self {
            TimeMode::Continuous { horizon, .. } | TimeMode::Discrete { horizon, .. } => horizon,
        }
    }

    pub fn eps(&self) -> f64 {
        match *self {
            TimeMode::Continuous { eps, .. } | TimeMode::Discrete { eps, .. } => eps,
        }
    }

    pub fn draw_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TimeMode::Continuous { eps, horizon } => eps + (horizon - eps) * rng.random::<f64>(),
            TimeMode::Discrete { n, eps, horizon } => match rng.random_range(0..=n) {
                0 => eps,
                k if k == n => horizon,
                k => k as f64 * horizon / n as f64,
            },
        }
    }
}

/// Inverse-multiplicative decay of the condition's maximum noise scale over
/// training iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VsSchedule {
    pub iterations: usize,
    pub sigma_max_initial: f64,
    pub sigma_max_target: f64,
}

impl VsSchedule {
    pub fn new(iterations: usize, sigma_max_initial: f64, sigma_max_target: f64) -> Result<Self> {
        let s = Self {
            iterations,
            sigma_max_initial,
            sigma_max_target,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("schedule needs at least one iteration".into()));
        }
        if !(self.sigma_max_target > 0.0 && self.sigma_max_target <= self.sigma_max_initial) {
            return Err(Error::Config(format!(
                "need 0 < target ({}) <= initial ({})",
                self.sigma_max_target, self.sigma_max_initial
            )));
        }
        Ok(())
    }

    /// σ_max at iteration `n`; iterations past the end stay at the target.
    pub fn sigma_max_at(&self, n: usize) -> f64 {
        if n == 0 {
            return self.sigma_max_initial;
        }
        if n >= self.iterations {
            return self.sigma_max_target;
        }
        let m = self.iterations as f64;
        let (init, target) = (self.sigma_max_initial, self.sigma_max_target);
        // Written as a ratio times `init` so equal endpoints give `init` exactly.
        init * (m * target / (n as f64 * (init - target) + m * target))
    }

    /// The condition's diffusion at iteration `n`, sharing σ_min and T with
    /// `template`.
    pub fn y_spec_at(&self, template: &VeSdeSpec, n: usize) -> Result<VeSdeSpec> {
        let sigma_max = self.sigma_max_at(n);
        if sigma_max < template.sigma_min() {
            return Err(Error::Config(format!(
                "scheduled sigma_max {sigma_max} fell below sigma_min {}",
                template.sigma_min()
            )));
        }
        template.with_sigma_max(sigma_max)
    }
}
