//! Denoising score-matching objectives for the four estimators.
//!
//! | estimator | model input      | model output   | diffused |
//! |-----------|------------------|----------------|----------|
//! | DSM       | `x_t`            | `n_x`          | x        |
//! | CDE       | `(x_t, y)`       | `n_x`          | x only   |
//! | CDiffE    | `(x_t, y_t)`     | `n_x + n_y`    | both, same speed |
//! | CMDE      | `(x_t, y_t)`     | `n_x + n_y`    | both, own speeds |
//!
//! Every per-sample loss is `½ vᵀ W v` with `v = target − model_out` and a
//! diagonal `W`. Coordinates of a frozen block (zero transition variance)
//! carry neither target nor weight.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{self, Purpose};
use crate::schedules::TimeMode;
use crate::sde::{MultiBlockSdeSpec, VeSdeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Dsm,
    Cde,
    Cdiffe,
    Cmde,
}

impl EstimatorKind {
    pub fn is_conditional(self) -> bool {
        !matches!(self, EstimatorKind::Dsm)
    }

    /// Whether the condition is diffused and resampled during sampling.
    pub fn diffuses_condition(self) -> bool {
        matches!(self, EstimatorKind::Cdiffe | EstimatorKind::Cmde)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingKind {
    Unit,
    /// Blockwise marginal transition variance.
    Mle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub estimator: EstimatorKind,
    pub weighting: WeightingKind,
    pub time_mode: TimeMode,
}

impl ObjectiveConfig {
    pub fn new(estimator: EstimatorKind, weighting: WeightingKind, time_mode: TimeMode) -> Self {
        Self {
            estimator,
            weighting,
            time_mode,
        }
    }

    pub fn validate(&self, mspec: &MultiBlockSdeSpec) -> Result<()> {
        self.time_mode.validate()?;
        match self.estimator {
            EstimatorKind::Dsm => {
                if mspec.blocks().len() != 1 {
                    return Err(Error::Config("DSM expects a single diffused block".into()));
                }
            }
            EstimatorKind::Cde | EstimatorKind::Cmde => {
                mspec.xy()?;
            }
            EstimatorKind::Cdiffe => {
                let (x, y) = mspec.xy()?;
                if x.spec != y.spec {
                    return Err(Error::Config(
                        "CDiffE diffuses x and y at the same speed; block specs differ".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self, mspec: &MultiBlockSdeSpec) -> usize {
        mspec.total_dim()
    }

    pub fn output_dim(&self, mspec: &MultiBlockSdeSpec) -> usize {
        match self.estimator {
            EstimatorKind::Cde => mspec.blocks()[0].dim,
            _ => mspec.total_dim(),
        }
    }
}

/// Scalar weighting λ(t).
pub fn dsm_weight(kind: WeightingKind, spec: &VeSdeSpec, t: f64) -> Result<f64> {
    match kind {
        WeightingKind::Unit => Ok(1.0),
        WeightingKind::Mle => spec.marginal_variance(t),
    }
}

/// Diagonal weighting matrix Λ(t).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    diag: Vec<f64>,
}

impl WeightMatrix {
    pub fn from_diag(diag: Vec<f64>) -> Self {
        Self { diag }
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// `vᵀ Λ v`
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        self.diag.iter().zip(v).map(|(w, x)| w * x * x).sum()
    }

    /// Dense form; off-diagonal entries are zero.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..n)
            .map(|i| (0..n).map(|j| if i == j { self.diag[i] } else { 0.0 }).collect())
            .collect()
    }
}

/// Λ_MLE(t): each block weighted by its own marginal transition variance.
pub fn mle_weight_matrix(mspec: &MultiBlockSdeSpec, t: f64) -> Result<WeightMatrix> {
    let (x, y) = mspec.xy()?;
    let wx = dsm_weight(WeightingKind::Mle, &x.spec, t)?;
    let wy = dsm_weight(WeightingKind::Mle, &y.spec, t)?;
    let mut diag = vec![wx; x.dim];
    diag.extend(std::iter::repeat_n(wy, y.dim));
    Ok(WeightMatrix { diag })
}

/// Output blocks of the model and the diffusion each one follows.
fn output_blocks<'a>(
    cfg: &ObjectiveConfig,
    mspec: &'a MultiBlockSdeSpec,
) -> Result<Vec<(std::ops::Range<usize>, &'a VeSdeSpec)>> {
    cfg.validate(mspec)?;
    let blocks = mspec.blocks();
    Ok(match cfg.estimator {
        EstimatorKind::Dsm | EstimatorKind::Cde => vec![(mspec.block_range(0), &blocks[0].spec)],
        EstimatorKind::Cdiffe | EstimatorKind::Cmde => (0..blocks.len())
            .map(|i| (mspec.block_range(i), &blocks[i].spec))
            .collect(),
    })
}

/// Factors turning raw network outputs into scores: `1/σ_b(t)` on each
/// diffused output block (σ_b² its marginal variance) and 1 on frozen ones.
/// The network then predicts unit-scale noise rather than a score whose
/// size grows without bound as `t → 0`.
pub fn output_scales(cfg: &ObjectiveConfig, mspec: &MultiBlockSdeSpec, t: f64) -> Result<Vec<f64>> {
    let mut scales = Vec::with_capacity(cfg.output_dim(mspec));
    for (range, spec) in output_blocks(cfg, mspec)? {
        let var = spec.marginal_variance(t)?;
        let c = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        scales.extend(std::iter::repeat_n(c, range.len()));
    }
    Ok(scales)
}

/// Factors applied to the network input: `1/√(1 + σ_b²(t))` on blocks the
/// estimator diffuses and 1 on a clean condition, keeping inputs O(1).
pub fn input_scales(cfg: &ObjectiveConfig, mspec: &MultiBlockSdeSpec, t: f64) -> Result<Vec<f64>> {
    cfg.validate(mspec)?;
    let mut scales = Vec::with_capacity(cfg.input_dim(mspec));
    for (i, block) in mspec.blocks().iter().enumerate() {
        let c = if i > 0 && !cfg.estimator.diffuses_condition() {
            1.0
        } else {
            1.0 / (1.0 + block.spec.marginal_variance(t)?).sqrt()
        };
        scales.extend(std::iter::repeat_n(c, block.dim));
    }
    Ok(scales)
}

/// Per-coordinate weights and denoising targets over the model output.
pub fn weights_and_targets(
    cfg: &ObjectiveConfig,
    mspec: &MultiBlockSdeSpec,
    t: f64,
    clean: &[f64],
    noised: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let total = mspec.total_dim();
    check_dim("clean sample", total, clean.len())?;
    check_dim("noised sample", total, noised.len())?;
    if cfg.estimator == EstimatorKind::Cde {
        let y_range = mspec.block_range(1);
        let same = clean[y_range.clone()]
            .iter()
            .zip(&noised[y_range])
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::Contract(
                "CDE requires the condition to enter undiffused".into(),
            ));
        }
    }
    // CDiffE uses one scalar weight from the shared spec; the blocks are
    // validated equal so the per-block loop below yields the same values.
    let blocks = output_blocks(cfg, mspec)?;
    let out_dim = cfg.output_dim(mspec);
    let mut weights = Vec::with_capacity(out_dim);
    let mut targets = Vec::with_capacity(out_dim);
    for (range, spec) in blocks {
        let var = spec.marginal_variance(t)?;
        if var == 0.0 {
            weights.extend(std::iter::repeat_n(0.0, range.len()));
            targets.extend(std::iter::repeat_n(0.0, range.len()));
            continue;
        }
        let w = dsm_weight(cfg.weighting, spec, t)?;
        weights.extend(std::iter::repeat_n(w, range.len()));
        targets.extend(spec.transition_score(&clean[range.clone()], &noised[range], t)?);
    }
    Ok((weights, targets))
}

/// `½ Σ w_i (target_i − out_i)²` and its gradient with respect to `out`.
pub fn weighted_residual(weights: &[f64], targets: &[f64], model_out: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(model_out.len());
    for ((&w, &tg), &o) in weights.iter().zip(targets).zip(model_out) {
        let v = tg - o;
        loss += w * v * v;
        grad.push(-w * v);
    }
    (0.5 * loss, grad)
}

/// Loss and output-gradient of one training sample.
pub fn per_sample_loss_and_output_grad(
    cfg: &ObjectiveConfig,
    mspec: &MultiBlockSdeSpec,
    t: f64,
    clean: &[f64],
    noised: &[f64],
    model_out: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_dim("model output", cfg.output_dim(mspec), model_out.len())?;
    let (w, tg) = weights_and_targets(cfg, mspec, t, clean, noised)?;
    Ok(weighted_residual(&w, &tg, model_out))
}

pub fn per_sample_loss(
    cfg: &ObjectiveConfig,
    mspec: &MultiBlockSdeSpec,
    t: f64,
    clean: &[f64],
    noised: &[f64],
    model_out: &[f64],
) -> Result<f64> {
    per_sample_loss_and_output_grad(cfg, mspec, t, clean, noised, model_out).map(|(l, _)| l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub t: f64,
    /// `(x_0, y)` (or `x_0` for DSM).
    pub clean: Vec<f64>,
    /// The model input: diffused coordinates replaced by their noised values.
    pub noised: Vec<f64>,
    /// Denoising target over the model output; zero on frozen blocks.
    pub target: Vec<f64>,
}

/// Draw `t`, diffuse the pair according to the estimator and attach the
/// analytic target. The x block always draws from the same sub-stream, so
/// estimators sharing an x diffusion see identical `x_t` under one seed.
pub fn make_training_sample(
    cfg: &ObjectiveConfig,
    mspec: &MultiBlockSdeSpec,
    x0: &[f64],
    y: &[f64],
    seed: u64,
) -> Result<TrainingSample> {
    cfg.validate(mspec)?;
    let t = cfg
        .time_mode
        .draw_time(&mut rng::substream(seed, Purpose::Time, 0));
    let mut x_rng = rng::substream(seed, Purpose::Block, 0);
    let blocks = mspec.blocks();
    check_dim("x_0", blocks[0].dim, x0.len())?;
    let x_t = blocks[0].spec.transition_sample(x0, t, &mut x_rng)?;
    let (clean, noised) = match cfg.estimator {
        EstimatorKind::Dsm => {
            check_dim("condition (DSM takes none)", 0, y.len())?;
            (x0.to_vec(), x_t)
        }
        EstimatorKind::Cde => {
            check_dim("y", blocks[1].dim, y.len())?;
            let clean = [x0, y].concat();
            let noised = [x_t.as_slice(), y].concat();
            (clean, noised)
        }
        EstimatorKind::Cdiffe | EstimatorKind::Cmde => {
            check_dim("y", blocks[1].dim, y.len())?;
            let mut y_rng = rng::substream(seed, Purpose::Block, 1);
            let y_t = blocks[1].spec.transition_sample(y, t, &mut y_rng)?;
            ([x0, y].concat(), [x_t, y_t].concat())
        }
    };
    let (_, target) = weights_and_targets(cfg, mspec, t, &clean, &noised)?;
    Ok(TrainingSample {
        t,
        clean,
        noised,
        target,
    })
}
