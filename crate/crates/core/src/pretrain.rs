//! Supervised source training of a model on clean data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::cross_entropy;
use crate::network::{argmax, Model, NetworkError, NormMode, ParamGroup, ParamGroupSelection};
use crate::optim::{Optimizer, OptimizerKind};
use crate::shiftgen::LabeledBatch;
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("invalid pretrain.{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "PretrainConfig::default_epochs")]
    pub epochs: usize,
    #[serde(default = "PretrainConfig::default_lr")]
    pub lr: f64,
    #[serde(default = "PretrainConfig::default_momentum")]
    pub momentum: f64,
    #[serde(default = "PretrainConfig::default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PretrainConfig {
    fn default_epochs() -> usize {
        200
    }
    fn default_lr() -> f64 {
        1e-2
    }
    fn default_momentum() -> f64 {
        0.9
    }
    fn default_batch_size() -> usize {
        64
    }

    pub fn validate(&self) -> Result<(), PretrainError> {
        if !(self.lr > 0.0) {
            return Err(PretrainError::Invalid {
                field: "lr",
                reason: "must be positive".into(),
            });
        }
        if self.batch_size < 2 {
            return Err(PretrainError::Invalid {
                field: "batch_size",
                reason: "must be at least 2 for batch normalization".into(),
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PretrainError::Invalid {
                field: "momentum",
                reason: "must lie in [0, 1)".into(),
            });
        }
        Ok(())
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: Self::default_epochs(),
            lr: Self::default_lr(),
            momentum: Self::default_momentum(),
            batch_size: Self::default_batch_size(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_error: f64,
}

/// Fraction of misclassified samples.
pub fn error_rate(model: &Model, batch: &LabeledBatch, mode: NormMode) -> Result<f64, NetworkError> {
    let logits = model.logits(&batch.x, mode)?;
    Ok(misclassified(logits.data(), logits.cols(), &batch.y))
}

pub(crate) fn misclassified(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let wrong = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) != y)
        .count();
    wrong as f64 / labels.len() as f64
}

/// Cross-entropy training with SGD over weights and normalization affine.
/// Activation parameters are never touched, so they stay at identity.
pub fn pretrain(model: &mut Model, train: &LabeledBatch, cfg: &PretrainConfig) -> Result<PretrainReport, PretrainError> {
    cfg.validate()?;
    let mut groups = vec![ParamGroup::Weights];
    if model.layers().iter().any(|l| {
        matches!(
            l,
            crate::network::Layer::BatchNorm(_) | crate::network::Layer::LayerNorm(_)
        )
    }) {
        groups.push(ParamGroup::Affine);
    }
    model.set_trainable(&ParamGroupSelection::new(groups))?;
    let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: cfg.momentum });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch = train.select(chunk);
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &batch.x, NormMode::Batch)?;
            let loss = cross_entropy(&mut tape, pass.logits, &batch.y)?;
            final_loss = tape.value(loss)[0];
            if !final_loss.is_finite() {
                model.freeze_all();
                return Err(PretrainError::Diverged { epoch, step });
            }
            let grads = tape.backward(loss)?;
            let updates: Vec<_> = pass
                .params
                .iter()
                .filter_map(|&(id, v)| grads.get(v).map(|g| (id, g.to_vec())))
                .collect();
            model.update_running_stats(&pass);
            opt.step(model, &updates, |_| cfg.lr);
        }
    }
    model.freeze_all();
    Ok(PretrainReport {
        epochs: cfg.epochs,
        final_loss,
        train_error: error_rate(model, train, NormMode::Running)?,
    })
}
