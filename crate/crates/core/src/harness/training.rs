use std::collections::BTreeMap;

use ndarray::Axis;
use rand::Rng;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::network::{Checkpoint, OptimizerState, ScoreNetwork};
use crate::objectives::{make_training_sample, TrainingSample};
use crate::rng::{self, Purpose};
use crate::tasks::TaskDataset;

const LOG_EVERY: usize = 500;

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub checkpoint: Checkpoint,
    /// Mean batch loss, one entry per step.
    pub losses: Vec<f64>,
}

/// The minibatch drawn at `step`.
pub fn training_batch(
    cfg: &ExperimentConfig,
    data: &TaskDataset,
    step: usize,
) -> Result<Vec<TrainingSample>> {
    let objective = cfg.objective();
    let mspec = cfg.training_mspec(step)?;
    let b = cfg.optimizer.batch_size;
    let mut pick = rng::substream(cfg.seed, Purpose::Batch, step as u64);
    let conditional = objective.estimator.is_conditional();
    (0..b)
        .map(|j| {
            let i = pick.random_range(0..data.len());
            let x = data.xs.index_axis(Axis(0), i).to_vec();
            let y = if conditional {
                data.ys.index_axis(Axis(0), i).to_vec()
            } else {
                Vec::new()
            };
            let seed = rng::derive_seed(cfg.seed, Purpose::TrainSample, (step * b + j) as u64);
            make_training_sample(&objective, &mspec, &x, &y, seed)
        })
        .collect()
}

/// Adam on the configured objective, tracking the EMA of the weights.
/// A non-finite loss aborts with [`Error::Diverged`].
pub fn train(cfg: &ExperimentConfig, data: &TaskDataset) -> Result<TrainedModel> {
    cfg.validate()?;
    let spec = cfg.network_spec()?;
    let net = ScoreNetwork::new(spec.clone())?;
    let objective = cfg.objective();
    let mut params = net.init_params(rng::derive_seed(cfg.seed, Purpose::Init, 0));
    let mut opt = OptimizerState::new(&params, cfg.optimizer.adam(), cfg.optimizer.ema_rate)?;
    let mut losses = Vec::with_capacity(cfg.optimizer.steps);

    for step in 0..cfg.optimizer.steps {
        let batch = training_batch(cfg, data, step)?;
        let mspec = cfg.training_mspec(step)?;
        let (loss, grad) = net.loss_and_grad(&params, &batch, &objective, &mspec)?;
        if !loss.is_finite() {
            log::error!("non-finite loss at step {step}; last finite loss {:?}", losses.last());
            return Err(Error::Diverged { step, loss });
        }
        opt.adam.lr = cfg.optimizer.lr_at(step);
        opt.adam_step(&mut params, &grad)
            .map_err(|_| Error::Diverged { step, loss })?;
        opt.ema_update(&params)?;
        losses.push(loss);
        if step % LOG_EVERY == 0 {
            log::info!("step {step}: loss {loss:.6}");
        }
    }

    let mut metadata = BTreeMap::new();
    metadata.insert("estimator".into(), cfg.estimator.name().into());
    metadata.insert("task".into(), cfg.task.name().into());
    metadata.insert("config".into(), cfg.to_toml()?);
    Ok(TrainedModel {
        checkpoint: Checkpoint {
            spec,
            optimizer: cfg.optimizer.adam(),
            ema_rate: cfg.optimizer.ema_rate,
            step: cfg.optimizer.steps as u64,
            master_seed: cfg.seed,
            metadata,
            params,
            ema: opt.ema,
        },
        losses,
    })
}
