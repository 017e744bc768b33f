//! Variance-exploding forward diffusions.
//!
//! A [`VeSdeSpec`] describes `dx = g(t) dw` with noise scale
//! `σ(t) = σ_min (σ_max/σ_min)^(t/T)`, so the transition kernel is
//! `p(x_t | x_0) = N(x_0, (σ(t)² − σ_min²) I)`. A [`MultiBlockSdeSpec`]
//! stacks independent VE diffusions over consecutive coordinate blocks,
//! which is how `x` and the condition `y` diffuse at different speeds.
//!
//! Drift is zero throughout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{self, Purpose, StreamRng};

/// Lower time cutoff used for all training and sampling evaluations.
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VeSdeSpec {
    sigma_min: f64,
    sigma_max: f64,
    horizon: f64,
}

impl VeSdeSpec {
    /// `sigma_max == sigma_min` is accepted and yields a frozen (never
    /// diffused) block.
    pub fn new(sigma_min: f64, sigma_max: f64, horizon: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min.is_finite()) {
            return Err(Error::Config(format!("sigma_min must be positive, got {sigma_min}")));
        }
        if !(sigma_max >= sigma_min && sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_max ({sigma_max}) must be at least sigma_min ({sigma_min})"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
            horizon,
        })
    }

    pub fn frozen(sigma_min: f64, horizon: f64) -> Result<Self> {
        Self::new(sigma_min, sigma_min, horizon)
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn is_frozen(&self) -> bool {
        self.sigma_max == self.sigma_min
    }

    pub fn with_sigma_max(&self, sigma_max: f64) -> Result<Self> {
        Self::new(self.sigma_min, sigma_max, self.horizon)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain(format!("time {t} outside [0, {}]", self.horizon)))
        }
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    /// σ(t). Exact at both endpoints.
    pub fn noise_scale(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(if t == 0.0 {
            self.sigma_min
        } else if t == self.horizon {
            self.sigma_max
        } else {
            self.sigma_min * (self.sigma_max / self.sigma_min).powf(t / self.horizon)
        })
    }

    /// Variance of `p(x_t | x_0)`: σ(t)² − σ_min².
    pub fn marginal_variance(&self, t: f64) -> Result<f64> {
        let s = self.noise_scale(t)?;
        Ok(s * s - self.sigma_min * self.sigma_min)
    }

    /// g(t) with g(t)² = d/dt σ(t)².
    pub fn instantaneous_diffusion(&self, t: f64) -> Result<f64> {
        let s = self.noise_scale(t)?;
        Ok(s * (2.0 * self.log_ratio() / self.horizon).sqrt())
    }

    pub fn transition_sample<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        t: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let var = self.marginal_variance(t)?;
        if var == 0.0 {
            return Ok(x0.to_vec());
        }
        let std = var.sqrt();
        Ok(x0
            .iter()
            .map(|&x| x + std * rng::standard_normal(rng))
            .collect())
    }

    /// ∇ ln p(x_t | x_0) = −(x_t − x_0) / var(t).
    pub fn transition_score(&self, x0: &[f64], x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim("transition_score", x0.len(), x_t.len())?;
        let var = self.marginal_variance(t)?;
        if var <= 0.0 {
            return Err(Error::Domain(format!(
                "transition kernel is singular at t = {t}"
            )));
        }
        Ok(x0
            .iter()
            .zip(x_t)
            .map(|(&a, &b)| -(b - a) / var)
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeBlock {
    pub dim: usize,
    pub spec: VeSdeSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiBlockSdeSpec {
    blocks: Vec<SdeBlock>,
}

impl MultiBlockSdeSpec {
    pub fn new(blocks: Vec<SdeBlock>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Config("at least one block is required".into()))?;
        if blocks.iter().any(|b| b.dim == 0) {
            return Err(Error::Config("block dimensions must be positive".into()));
        }
        if blocks.iter().any(|b| b.spec.horizon != first.spec.horizon) {
            return Err(Error::Config("all blocks must share the same horizon".into()));
        }
        Ok(Self { blocks })
    }

    pub fn single(dim: usize, spec: VeSdeSpec) -> Result<Self> {
        Self::new(vec![SdeBlock { dim, spec }])
    }

    pub fn two_block(n_x: usize, x: VeSdeSpec, n_y: usize, y: VeSdeSpec) -> Result<Self> {
        Self::new(vec![SdeBlock { dim: n_x, spec: x }, SdeBlock { dim: n_y, spec: y }])
    }

    pub fn blocks(&self) -> &[SdeBlock] {
        &self.blocks
    }

    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim).sum()
    }

    pub fn horizon(&self) -> f64 {
        self.blocks[0].spec.horizon
    }

    /// Coordinate range of block `i`.
    pub fn block_range(&self, i: usize) -> std::ops::Range<usize> {
        let start: usize = self.blocks[..i].iter().map(|b| b.dim).sum();
        start..start + self.blocks[i].dim
    }

    /// (x spec, y spec) of a two-block layout.
    pub fn xy(&self) -> Result<(&SdeBlock, &SdeBlock)> {
        match self.blocks.as_slice() {
            [x, y] => Ok((x, y)),
            _ => Err(Error::Config(format!(
                "expected a two-block (x, y) layout, got {} blocks",
                self.blocks.len()
            ))),
        }
    }

    /// Blockwise transition sample; block `i` draws only from `block_rngs[i]`.
    pub fn joint_transition_sample(
        &self,
        z0: &[f64],
        t: f64,
        block_rngs: &mut [StreamRng],
    ) -> Result<Vec<f64>> {
        check_dim("joint_transition_sample", self.total_dim(), z0.len())?;
        check_dim("joint_transition_sample rngs", self.blocks.len(), block_rngs.len())?;
        let mut out = Vec::with_capacity(z0.len());
        for (i, (block, rng)) in self.blocks.iter().zip(block_rngs.iter_mut()).enumerate() {
            out.extend(block.spec.transition_sample(&z0[self.block_range(i)], t, rng)?);
        }
        Ok(out)
    }

    /// Same as [`Self::joint_transition_sample`] with per-block streams
    /// derived from `seed`.
    pub fn joint_transition_sample_seeded(&self, z0: &[f64], t: f64, seed: u64) -> Result<Vec<f64>> {
        let mut rngs = self.block_streams(seed);
        self.joint_transition_sample(z0, t, &mut rngs)
    }

    pub fn block_streams(&self, seed: u64) -> Vec<StreamRng> {
        (0..self.blocks.len())
            .map(|i| rng::substream(seed, Purpose::Block, i as u64))
            .collect()
    }

    /// Draw from the VE prior N(0, σ_max² I) block by block.
    pub fn prior_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_dim());
        for block in &self.blocks {
            let s = block.spec.sigma_max;
            out.extend((0..block.dim).map(|_| s * rng::standard_normal(rng)));
        }
        out
    }
}
