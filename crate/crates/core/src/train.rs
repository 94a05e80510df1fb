//! The optimisation loop: shuffled negative-sampled batches, Adam, validation
//! AUC after every epoch, early stopping and best-epoch selection.

use std::time::Instant;

use log::info;

use crate::autodiff::{Params, Tape};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{sample_training_batches, Histories, InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::model::{Model, ModelInputs};
use crate::optim::{Adam, AdamConfig};
use crate::seed::{self, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Loss per training example.
    pub mean_loss: f64,
    pub validation_auc: Option<f64>,
    pub seconds: f64,
}

impl EpochLog {
    /// `epoch loss validation_auc seconds`, tab-separated.
    pub fn line(&self) -> String {
        format!(
            "{}\t{:.6}\t{}\t{:.3}",
            self.epoch,
            self.mean_loss,
            self.validation_auc
                .map_or("nan".to_string(), |a| format!("{a:.6}")),
            self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last epoch when no
    /// validation AUC is available).
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut metrics = Vec::new();
        if let Some(auc) = self
            .log
            .iter()
            .find(|l| l.epoch == self.best_epoch)
            .and_then(|l| l.validation_auc)
        {
            metrics.push(("validation_auc".to_string(), auc));
        }
        self.model.to_checkpoint(self.best_epoch, metrics)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|l| l.mean_loss).collect()
    }
}

fn norms(params: &Params) -> String {
    params
        .iter()
        .map(|(_, name, t)| format!("{name}={:.3e}", t.norm()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains a fresh model. `dataset` is re-indexed to the item order of
/// `inputs`; items it rates must all be known to `inputs`.
pub fn train(
    dataset: &InteractionDataset,
    inputs: ModelInputs,
    config: &RunConfig,
) -> Result<TrainOutcome> {
    let dataset = dataset.reindex_items(&inputs.items)?;
    let mut model = Model::new(config.clone(), inputs)?;
    let cfg = &model.config.clone();
    let frozen = model.frozen_mask();
    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            epsilon: cfg.adam_epsilon,
        },
    );
    let fixed = Histories::build(&dataset, cfg.history_size, cfg.seed);
    if fixed.included().next().is_none() && cfg.epochs > 0 {
        return Err(Error::Usage(
            "no user has both liked and disliked training items".into(),
        ));
    }

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Params)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let resampled;
        let histories = if cfg.resample_histories {
            resampled = Histories::build(
                &dataset,
                cfg.history_size,
                seed::derive(cfg.seed, &[stream::HISTORY, epoch as u64]),
            );
            &resampled
        } else {
            &fixed
        };
        let batches = sample_training_batches(
            &dataset,
            histories,
            cfg.negatives,
            cfg.batch_size,
            seed::derive(cfg.seed, &[epoch as u64]),
        )?;
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            let mut rng = seed::rng(cfg.seed, &[stream::DROPOUT, epoch as u64, b as u64]);
            let mut tape = Tape::new();
            let loss = model.batch_loss(&mut tape, batch, histories, true, &mut rng)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    norms: norms(&model.params),
                });
            }
            let grads = tape.backward(loss, &model.params)?;
            adam.step(&mut model.params, &grads, &frozen)?;
            total += value;
            count += batch.len();
        }
        let mean_loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let validation_auc = evaluate_model(&model, &dataset, Split::Validation, &[])
            .ok()
            .map(|r| r.auc);
        let entry = EpochLog {
            epoch,
            mean_loss,
            validation_auc,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!("epoch {}", entry.line());
        log.push(entry);

        match validation_auc {
            Some(auc) if best.as_ref().is_none_or(|(b, _, _)| auc > *b) => {
                best = Some((auc, epoch, model.params.clone()));
                since_best = 0;
            }
            Some(_) => since_best += 1,
            None => {}
        }
        if cfg.patience > 0 && since_best >= cfg.patience {
            info!("no validation improvement for {since_best} epochs; stopping");
            break;
        }
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => log.last().map_or(0, |l| l.epoch),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
    })
}
