use serde::{Deserialize, Serialize};

use super::{adam_step, lr_schedule, AdamState, Embedder, OptimConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{batch_hard_loss, LossConfig};
use crate::sampler::{BatchSpec, CameraBatchSampler};

/// Everything the training loop needs besides data and the initial network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub batch: BatchSpec,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Accept identities spanning several cameras (batches then group images
    /// per camera and identity).
    pub cross_camera: bool,
}

/// Evaluation results produced by the per-epoch hook.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochEval {
    pub rank1: f64,
    pub map: f64,
    pub pseudo_f: f64,
    pub xcam_nn_prob: f64,
    pub xcam_nn_prob_train: Option<f64>,
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean over batches of the loss divided by the batch size.
    pub mean_loss: f64,
    pub lr: f64,
    pub eval: Option<EpochEval>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub records: Vec<MetricsRecord>,
    pub embedder: Embedder,
    pub spec: TrainSpec,
}

/// Runs `spec.optim.epochs` epochs of `ceil(|train| / batch_size)` sampled
/// batches each. Epochs are numbered from 1 and the learning rate of epoch
/// `t` is `lr_schedule(t)`. The hook sees the network after every epoch and
/// may return evaluation metrics for the record.
pub fn train<F>(
    train_set: &Dataset,
    init: Embedder,
    spec: &TrainSpec,
    mut eval_hook: F,
) -> Result<TrainRun>
where
    F: FnMut(usize, &Embedder) -> Result<Option<EpochEval>>,
{
    spec.loss.validate()?;
    spec.optim.validate()?;
    spec.batch.validate()?;
    if init.d_in() != train_set.d_in() {
        return Err(Error::Shape(format!(
            "embedder expects {} inputs, dataset has {}",
            init.d_in(),
            train_set.d_in()
        )));
    }
    let mut embedder = init;
    let mut records = Vec::with_capacity(spec.optim.epochs);
    if spec.optim.epochs == 0 {
        return Ok(TrainRun {
            records,
            embedder,
            spec: *spec,
        });
    }
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut sampler = if spec.cross_camera {
        CameraBatchSampler::new_cross_camera(train_set, spec.batch, spec.seed)?
    } else {
        CameraBatchSampler::new(train_set, spec.batch, spec.seed)?
    };
    let batches = spec.batch.batches_per_epoch(train_set.len());
    let mut adam = AdamState::new(embedder.n_params());

    for epoch in 1..=spec.optim.epochs {
        let lr = lr_schedule(epoch as f64, &spec.optim);
        let mut loss_sum = 0.0;
        for _ in 0..batches {
            let batch = sampler.sample_batch();
            let (emb, cache) = embedder.forward(&batch.inputs)?;
            let out = batch_hard_loss(&emb, &batch.identities, &batch.cameras, &spec.loss)?;
            let grads = embedder.backward(&cache, &out.grad)?;
            adam_step(
                embedder.params_mut(),
                &grads,
                &mut adam,
                lr,
                spec.optim.weight_decay,
                &spec.optim,
            )?;
            loss_sum += out.mean_per_anchor();
        }
        let mean_loss = loss_sum / batches as f64;
        if !mean_loss.is_finite() || !embedder.is_finite() {
            return Err(Error::Data(format!("training diverged at epoch {epoch}")));
        }
        let eval = eval_hook(epoch, &embedder)?;
        log::debug!("epoch {epoch}: loss {mean_loss:.5} lr {lr:.3e}");
        records.push(MetricsRecord {
            epoch,
            mean_loss,
            lr,
            eval,
        });
    }
    Ok(TrainRun {
        records,
        embedder,
        spec: *spec,
    })
}
