use std::path::Path;

use nalgebra::DVector;
use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::config::{Estimator, ExperimentConfig, ScoreSourceKind};
use super::metrics::{fit_gaussian, frechet_gaussian, reconstruction_metrics};
use super::training::{train, TrainedModel};
use crate::error::{Error, Result};
use crate::network::{Checkpoint, ScoreNetwork};
use crate::oracles::NoiseErrorPoint;
use crate::rng::{self, Purpose};
use crate::samplers::{
    sample_conditional_batch, sample_unconditional, CleanConditionalScore,
    DiffusedConditionalScore, GaussianScore, GmmScore, NetworkScore, ScoreSource,
};
use crate::tasks::{
    linear_joint, make_dataset, pair_operator_seed, BaseDistribution, ForwardOperator,
    MaskPosteriorScore, TaskDataset,
};

/// Training and held-out datasets for a config.
pub fn datasets(cfg: &ExperimentConfig) -> Result<(TaskDataset, TaskDataset)> {
    let train = make_dataset(
        &cfg.base,
        &cfg.task,
        cfg.n_train,
        rng::derive_seed(cfg.seed, Purpose::Data, 0),
    )?;
    let eval = make_dataset(
        &cfg.base,
        &cfg.task,
        cfg.n_eval,
        rng::derive_seed(cfg.seed, Purpose::Data, 1),
    )?;
    Ok((train, eval))
}

/// The score model a config samples with: the trained network, or the
/// task's closed-form score.
pub fn score_source(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Checkpoint>,
) -> Result<Box<dyn ScoreSource>> {
    match cfg.score_source {
        ScoreSourceKind::Network => {
            let ckpt = checkpoint
                .ok_or_else(|| Error::Config("a network score needs a checkpoint".into()))?;
            if ckpt.spec != cfg.network_spec()? {
                return Err(Error::Config("checkpoint does not match the configured network".into()));
            }
            let params = if cfg.sampler.use_ema {
                ckpt.ema.clone()
            } else {
                ckpt.params.clone()
            };
            Ok(Box::new(NetworkScore::new(
                ScoreNetwork::new(ckpt.spec.clone())?,
                params,
                cfg.objective(),
                cfg.sampling_mspec()?,
            )?))
        }
        ScoreSourceKind::Oracle => oracle_source(cfg),
    }
}

fn oracle_source(cfg: &ExperimentConfig) -> Result<Box<dyn ScoreSource>> {
    let x_spec = cfg.x_spec()?;
    if cfg.estimator == Estimator::Dse {
        return Ok(match &cfg.base {
            BaseDistribution::Gaussian(g) => Box::new(GaussianScore {
                target: g.clone(),
                spec: x_spec,
            }),
            BaseDistribution::Gmm(m) => Box::new(GmmScore {
                target: m.clone(),
                spec: x_spec,
            }),
        });
    }
    let base = cfg
        .base
        .as_gaussian()
        .ok_or_else(|| Error::Config("conditional oracles need a Gaussian base".into()))?;
    match (&cfg.task, cfg.estimator) {
        (ForwardOperator::Mask, Estimator::Cde) => Ok(Box::new(MaskPosteriorScore::new(base, x_spec)?)),
        (ForwardOperator::Mask, _) => Err(Error::Config(
            "the masking oracle is only available with a clean condition".into(),
        )),
        (op, Estimator::Cde) => {
            let joint = linear_joint(base, &op.realize(cfg.n_x(), 0)?)?;
            Ok(Box::new(CleanConditionalScore::new(&joint, x_spec)?))
        }
        (op, _) => {
            let joint = linear_joint(base, &op.realize(cfg.n_x(), 0)?)?;
            Ok(Box::new(DiffusedConditionalScore::new(joint, cfg.sampling_mspec()?)?))
        }
    }
}

/// `k` reconstructions per held-out observation, observation-major.
pub fn reconstruct(
    cfg: &ExperimentConfig,
    source: &dyn ScoreSource,
    eval: &TaskDataset,
) -> Result<Array2<f64>> {
    let k = cfg.k_reconstructions;
    let seed = rng::derive_seed(cfg.seed, Purpose::Evaluation, 0);
    let out = if cfg.estimator == Estimator::Dse {
        sample_unconditional(source, &cfg.x_spec()?, &cfg.sampler, eval.len() * k, seed)?
    } else {
        let mut ys = Array2::zeros((eval.len() * k, eval.n_y()));
        for (r, mut row) in ys.axis_iter_mut(Axis(0)).enumerate() {
            row.assign(&eval.ys.row(r / k));
        }
        sample_conditional_batch(
            source,
            &cfg.sampling_mspec()?,
            ys.view(),
            &cfg.sampler,
            cfg.estimator.kind(),
            seed,
        )?
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sampling produced non-finite reconstructions".into()));
    }
    Ok(out)
}

/// One line of `metrics.csv` plus the extra statistics kept in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: String,
    pub estimator: String,
    pub sigma_y_max: f64,
    pub seed: u64,
    pub psnr: f64,
    pub mse: f64,
    pub consistency_psnr: f64,
    pub diversity: f64,
    pub ufid: f64,
    pub jfid: f64,
    pub n_eval: usize,
    pub k: usize,
    pub psnr_all: f64,
    pub mse_stderr: f64,
    pub diversity_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub notes: Vec<String>,
}

pub const METRICS_HEADER: &str =
    "task,estimator,sigma_y_max,seed,psnr,mse,consistency_psnr,diversity,ufid,jfid,n_eval,k";
pub const CURVE_HEADER: &str = "sigma_y_max,mse,mc_stderr";

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let fields = [
                r.task.clone(),
                r.estimator.clone(),
                fmt_f64(r.sigma_y_max),
                r.seed.to_string(),
                fmt_f64(r.psnr),
                fmt_f64(r.mse),
                fmt_f64(r.consistency_psnr),
                fmt_f64(r.diversity),
                fmt_f64(r.ufid),
                fmt_f64(r.jfid),
                r.n_eval.to_string(),
                r.k.to_string(),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub fn curve_to_csv(points: &[NoiseErrorPoint]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            fmt_f64(p.sigma_y_max),
            fmt_f64(p.mse),
            fmt_f64(p.mc_stderr)
        ));
    }
    out
}

fn report_notes(cfg: &ExperimentConfig) -> Vec<String> {
    let mut notes = Vec::new();
    if matches!(cfg.task, ForwardOperator::Pool { .. }) {
        notes.push("downscaling is average pooling, not bicubic".into());
    }
    if cfg.estimator == Estimator::Dse {
        notes.push("dse reconstructions are unconditional samples".into());
    }
    if cfg.score_source == ScoreSourceKind::Oracle {
        notes.push("closed-form score, no training".into());
    }
    notes.push("ufid/jfid are Frechet distances between Gaussian fits of raw vectors".into());
    notes
}

/// Reconstruct the held-out set with `source` and score it.
pub fn evaluate(
    cfg: &ExperimentConfig,
    source: &dyn ScoreSource,
    eval: &TaskDataset,
) -> Result<MetricsReport> {
    let k = cfg.k_reconstructions;
    let recs = reconstruct(cfg, source, eval)?;
    let n_x = eval.n_x();
    let rec = reconstruction_metrics(eval.xs.view(), eval.ys.view(), recs.view(), k, cfg.data_range, |i, x| {
        let a = cfg.task.realize(n_x, pair_operator_seed(eval.seed, i))?;
        Ok((a.matrix * DVector::from_column_slice(x)).iter().copied().collect())
    })?;
    let first = recs.select(Axis(0), &(0..eval.len()).map(|i| i * k).collect::<Vec<_>>());
    let ufid = frechet_gaussian(&fit_gaussian(eval.xs.view())?, &fit_gaussian(first.view())?)?;
    let joint_true = concatenate(Axis(1), &[eval.xs.view(), eval.ys.view()])
        .map_err(|e| Error::Numeric(e.to_string()))?;
    let joint_rec = concatenate(Axis(1), &[first.view(), eval.ys.view()])
        .map_err(|e| Error::Numeric(e.to_string()))?;
    let jfid = frechet_gaussian(&fit_gaussian(joint_true.view())?, &fit_gaussian(joint_rec.view())?)?;
    Ok(MetricsReport {
        rows: vec![MetricsRow {
            task: cfg.task.name().into(),
            estimator: cfg.estimator.name().into(),
            sigma_y_max: cfg.reported_sigma_y_max(),
            seed: cfg.seed,
            psnr: rec.psnr,
            mse: rec.mse,
            consistency_psnr: rec.consistency_psnr,
            diversity: rec.diversity,
            ufid,
            jfid,
            n_eval: eval.len(),
            k,
            psnr_all: rec.psnr_all,
            mse_stderr: rec.mse_stderr,
            diversity_stderr: rec.diversity_stderr,
        }],
        notes: report_notes(cfg),
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: MetricsReport,
    /// `None` when the config uses a closed-form score.
    pub model: Option<TrainedModel>,
}

/// Dataset, training, reconstruction and metrics for one config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let (train_set, eval_set) = datasets(cfg)?;
    let model = match cfg.score_source {
        ScoreSourceKind::Network => Some(train(cfg, &train_set)?),
        ScoreSourceKind::Oracle => None,
    };
    let source = score_source(cfg, model.as_ref().map(|m| &m.checkpoint))?;
    let report = evaluate(cfg, source.as_ref(), &eval_set)?;
    Ok(ExperimentOutcome { report, model })
}

/// Run and write `metrics.csv` (and `checkpoint.bin` when trained) to `out`.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    std::fs::create_dir_all(out)?;
    let outcome = run_experiment(cfg)?;
    outcome.report.write_csv(&out.join("metrics.csv"))?;
    if let Some(m) = &outcome.model {
        m.checkpoint.save(&out.join("checkpoint.bin"))?;
    }
    Ok(outcome)
}
