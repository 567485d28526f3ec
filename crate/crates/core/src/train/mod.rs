//! Self-supervised pretraining, label-constrained fine-tuning and the
//! optimizers they share.

mod finetune;
mod optim;
mod pretrain;

use std::collections::HashSet;

use ndarray::Array2;
use thiserror::Error;

use crate::config::ConfigError;
use crate::evalkit::EvalError;
use crate::nets::NetError;
use crate::objectives::ObjectiveError;
use crate::rng::RngStream;
use crate::types::{ImageRecord, ShapeError};
use crate::views::ViewError;

pub use finetune::{
    finetune_segmentation, load_segmentation_model, multiclass_soft_dice, EncoderInit, FinetuneEpoch, FinetuneOptions,
    FinetuneOutcome, LabeledPatch,
};
pub use optim::{adam_step, lars_step, sgd_step, LrSchedule, Optimizer};
pub use pretrain::{load_pretrained_encoder, pretrain, PretrainOptions, PretrainOutcome, StepLog};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("labeled subset would be empty")]
    EmptySubset,
    #[error("no records to train on")]
    EmptyDataset,
    #[error("{0}")]
    Invalid(String),
}

/// Seeded uniform sample of `ceil(fraction * n)` records, returned in input
/// order. Selection depends only on the record ids and the seed.
pub fn select_labeled_subset(
    records: &[ImageRecord],
    fraction: f64,
    seed: u64,
) -> Result<Vec<ImageRecord>, TrainError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TrainError::Invalid(format!("label fraction {fraction} outside (0, 1]")));
    }
    let k = (fraction * records.len() as f64).ceil() as usize;
    if k == 0 {
        return Err(TrainError::EmptySubset);
    }
    let mut ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != records.len() {
        return Err(TrainError::Invalid("record ids must be unique".into()));
    }
    let mut rng = RngStream::new(seed, "labeled_subset");
    rng.shuffle(&mut ids);
    let chosen: HashSet<&str> = ids[..k].iter().copied().collect();
    Ok(records
        .iter()
        .filter(|r| chosen.contains(r.id.as_str()))
        .cloned()
        .collect())
}

/// Soft Dice loss `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
pub fn dice_loss(pred: &Array2<f32>, target: &Array2<u8>, epsilon: f64) -> Result<f64, ShapeError> {
    if pred.dim() != target.dim() {
        return Err(ShapeError::Mismatch {
            expected: target.dim(),
            actual: pred.dim(),
        });
    }
    let t: Vec<f32> = target.iter().map(|&v| f32::from(v > 0)).collect();
    let p: Vec<f32> = pred.iter().copied().collect();
    Ok(soft_dice(&p, &t, epsilon).0)
}

/// Soft Dice loss over flat slices with its gradient in `pred`.
pub fn soft_dice(pred: &[f32], target: &[f32], epsilon: f64) -> (f64, Vec<f32>) {
    let mut inter = 0.0f64;
    let mut sp = 0.0f64;
    let mut st = 0.0f64;
    for (&p, &t) in pred.iter().zip(target) {
        inter += p as f64 * t as f64;
        sp += p as f64;
        st += t as f64;
    }
    let num = 2.0 * inter + epsilon;
    let den = sp + st + epsilon;
    let grad = target
        .iter()
        .map(|&t| (-(2.0 * t as f64 * den - num) / (den * den)) as f32)
        .collect();
    (1.0 - num / den, grad)
}
