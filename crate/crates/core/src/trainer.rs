//! Supervised fine-tuning loops and contrastive backbone pretraining.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::meta::{loss_gradient, LossKind};
use crate::model::Model;
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::ParamSet;
use crate::synthdata::{Dataset, Example, PairedBatch, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 1e-2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted so that an update-free run can be checked.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train: lr must be a non-negative number".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train: epochs and batch_size must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train: weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    pub dev_accuracy: Option<f64>,
    pub history: Vec<EpochRecord>,
}

fn minibatches<'a>(
    examples: &'a [Example],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<&'a Example>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| &examples[i]).collect())
        .collect()
}

fn run_epochs(
    model: &Model,
    params: &ParamSet,
    train: &[Example],
    dev: Option<&[Example]>,
    kind: LossKind,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let cfg = model.config();
    if train.is_empty() {
        return Err(Error::InsufficientData {
            language: String::new(),
            needed: 1,
            available: 0,
        });
    }
    if kind == LossKind::Task && train.iter().any(|e| e.label.is_none()) {
        return Err(Error::MissingLabels);
    }
    let lang = train[0].lang.as_str();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.lr, config.weight_decay);
    let mut theta = params.clone();
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for chunk in minibatches(train, config.batch_size, &mut rng) {
            let batch = PairedBatch::from_examples(lang, cfg.image_dim, cfg.text_dim, chunk);
            let (loss, grad) = loss_gradient(model, &theta, kind, &batch)?;
            if config.lr > 0.0 {
                theta = opt.step(&theta, &grad)?;
            }
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite {
                op: "training loss".into(),
            });
        }
        let dev_accuracy = match dev {
            Some(d) => Some(accuracy(model, &theta, d)?),
            None => None,
        };
        tracing::debug!(epoch, train_loss, ?dev_accuracy, "epoch");
        history.push(EpochRecord {
            epoch,
            train_loss,
            dev_accuracy,
        });
        let score = dev_accuracy.unwrap_or(f64::NEG_INFINITY);
        // Without a dev set the last epoch is kept; with one, the earliest
        // epoch reaching the best dev accuracy.
        if dev.is_none() || best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((epoch, score, theta.clone()));
        }
    }

    let (best_epoch, _, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_epoch,
        dev_accuracy: history[best_epoch - 1].dev_accuracy,
        history,
    })
}

/// Mini-batch cross-entropy training. With `dev`, returns the epoch
/// checkpoint with the best dev accuracy; otherwise the final one.
pub fn finetune(
    model: &Model,
    params: &ParamSet,
    train: &[Example],
    dev: Option<&[Example]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    run_epochs(model, params, train, dev, LossKind::Task, config)
}

/// Task fine-tuning on the English train split with dev selection.
pub fn finetune_english(
    model: &Model,
    params: &ParamSet,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let train = dataset.split("en", Split::Train)?;
    let dev = dataset.split("en", Split::Dev)?;
    finetune(model, params, train, Some(dev), config)
}

/// Contrastive training of encoders and projections on the paired English
/// train split. Labels are never read. Stands in for vision-language
/// pretraining; returns the final parameters.
pub fn pretrain_contrastive(
    model: &Model,
    params: &ParamSet,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let train: Vec<Example> = dataset
        .split("en", Split::Train)?
        .iter()
        .map(|e| Example {
            label: None,
            ..e.clone()
        })
        .collect();
    run_epochs(model, params, &train, None, LossKind::Contrastive, config)
}
