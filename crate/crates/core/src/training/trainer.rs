use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{NpcrfModel, UnarySource};
use super::optim::{AdamW, AdamWConfig};
use crate::dataset::TypingInstance;
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, EvalRow, TypeSet};
use crate::potentials::Dropout;
use crate::rng;

pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_EPOCHS: usize = 50;
pub const DEFAULT_PATIENCE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without dev macro-F1 improvement before stopping.
    pub patience: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            patience: DEFAULT_PATIENCE,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: EvalRow,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev macro-F1.
    pub best: NpcrfModel,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Scores the model's final-iterate predictions on `instances`.
pub fn evaluate(model: &NpcrfModel, instances: &[TypingInstance], source: UnarySource<'_>) -> Result<EvalReport> {
    let trajectories = model.predict_all(instances, source)?;
    let golds: Vec<TypeSet> = instances.iter().map(|i| i.gold.clone()).collect();
    let m = &model.config.mfvi;
    Ok(EvalReport::build(&trajectories, &golds, m.threshold, m.force_nonempty))
}

/// Mini-batch training with early stopping on dev macro-F1.
///
/// Instances with an empty gold set are skipped. Given the same seed and
/// data the run is reproducible, independent of thread count.
pub fn train(
    mut model: NpcrfModel,
    train_set: &[TypingInstance],
    train_source: UnarySource<'_>,
    dev_set: &[TypingInstance],
    dev_source: UnarySource<'_>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let usable: Vec<&TypingInstance> = train_set.iter().filter(|i| !i.gold.is_empty()).collect();
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut shuffle_rng = rng::substream(config.seed, rng::SHUFFLE);
    let mut dropout_rng = rng::substream(config.seed, rng::DROPOUT);
    let mut optimizer = AdamW::new(config.optimizer);

    let initial_dev = evaluate(&model, dev_set, dev_source)?.final_row;
    let mut best = model.clone();
    let mut best_f1 = initial_dev.macro_scores.f1;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut log = Vec::new();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&TypingInstance> = chunk.iter().map(|&i| usable[i]).collect();
            let dropout = if model.config.dropout > 0.0 {
                Dropout::Train {
                    rate: model.config.dropout,
                    seed: dropout_rng.random(),
                }
            } else {
                Dropout::Off
            };
            let (loss, grads) = model.loss_and_grad(&batch, train_source, dropout)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("batch of {} instances, loss {loss}", batch.len()),
                });
            }
            let grad_slices: Vec<&[f64]> = grads.tensors().into_iter().map(|(_, _, g)| g).collect();
            let mut params: Vec<&mut [f64]> = model.params.tensors_mut().into_iter().map(|(_, p)| p).collect();
            optimizer.step(&mut params, &grad_slices);
            loss_sum += loss;
            batches += 1;
        }
        let dev = evaluate(&model, dev_set, dev_source)?.final_row;
        let improved = dev.macro_scores.f1 > best_f1;
        if improved {
            best = model.clone();
            best_f1 = dev.macro_scores.f1;
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        let train_loss = if batches == 0 { 0.0 } else { loss_sum / batches as f64 };
        info!(
            "epoch {epoch}: loss {train_loss:.5} dev macro-F1 {:.4}{}",
            dev.macro_scores.f1,
            if improved { " *" } else { "" }
        );
        log.push(EpochLog {
            epoch,
            train_loss,
            dev,
            improved,
        });
        if stale >= config.patience {
            break;
        }
    }
    Ok(TrainOutcome { best, best_epoch, log })
}
