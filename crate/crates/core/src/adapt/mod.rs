//! Online test-time adaptation: predict on each incoming batch, then take
//! an entropy-minimization step on the trainable parameter groups.

mod engine;
mod metrics;
mod objective;
pub mod report;
mod sweep;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::network::{NetworkError, NormMode, ParamGroup, ParamGroupSelection};
use crate::optim::OptimizerKind;
use crate::shiftgen::{CorruptionSpec, ShiftError};
use crate::tensor::TensorError;

pub use engine::{
    adapt_step, evaluate_stream, pass_through_ratio, run_continual, run_episode, Segment, DEFAULT_PASS_THROUGH_THRESHOLD,
};
pub use metrics::{write_metrics_csv, RunMetrics, SegmentSummary, StepRecord, StepStatus, METRICS_COLUMNS};
pub use objective::{entropy_loss, select_samples, Selection, DEFAULT_E0_FACTOR};
pub use sweep::{prepare_cell, sweep, write_sweep_csv, SweepCell, SweepGrid, SweepRow, SweepSettings, SWEEP_COLUMNS};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Shift(#[from] ShiftError),
    #[error("no sample passed the entropy threshold")]
    NoSelectedSamples,
    #[error("no trainable parameters: choose parameter groups before adapting")]
    NothingTrainable,
    #[error("invalid adapt.{field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    #[serde(default = "default_e0")]
    pub e0_factor: f64,
    #[serde(default = "default_true")]
    pub weighting: bool,
}

fn default_e0() -> f64 {
    DEFAULT_E0_FACTOR
}
fn default_true() -> bool {
    true
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            e0_factor: DEFAULT_E0_FACTOR,
            weighting: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// The model is reset to its starting state after every stream.
    #[default]
    Episodic,
    /// Corruption segments follow each other without any reset.
    Continual(Vec<CorruptionSpec>),
}

impl Schedule {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Episodic => "episodic",
            Self::Continual(_) => "continual",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "AdaptConfig::default_lr")]
    pub base_lr: f64,
    /// Overrides of the per-group multipliers (activation groups default
    /// to 10, everything else to 1).
    #[serde(default)]
    pub group_lr_multipliers: BTreeMap<ParamGroup, f64>,
    #[serde(default = "AdaptConfig::default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub selection: Option<SelectionConfig>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "AdaptConfig::default_steps")]
    pub steps_per_batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "AdaptConfig::default_norm_mode")]
    pub norm_mode: NormMode,
    #[serde(default = "AdaptConfig::default_threshold")]
    pub pass_through_threshold: f64,
    /// Scale the base rate by 0.1 when the batch holds fewer than 16 samples.
    #[serde(default = "default_true")]
    pub small_batch_scaling: bool,
}

impl AdaptConfig {
    fn default_lr() -> f64 {
        1e-3
    }
    fn default_batch_size() -> usize {
        64
    }
    fn default_steps() -> usize {
        1
    }
    fn default_norm_mode() -> NormMode {
        NormMode::Batch
    }
    fn default_threshold() -> f64 {
        DEFAULT_PASS_THROUGH_THRESHOLD
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        let bad = |field, reason: &str| {
            Err(AdaptError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return bad("base_lr", "must be a finite non-negative number");
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be at least 1");
        }
        if self.steps_per_batch < 1 {
            return bad("steps_per_batch", "must be at least 1");
        }
        if self.group_lr_multipliers.values().any(|m| !(*m > 0.0)) {
            return bad("group_lr_multipliers", "multipliers must be positive");
        }
        if let Some(sel) = &self.selection {
            if !(sel.e0_factor > 0.0 && sel.e0_factor <= 1.0) {
                return bad("selection.e0_factor", "must lie in (0, 1]");
            }
        }
        if let Schedule::Continual(segments) = &self.schedule {
            if segments.is_empty() {
                return bad("schedule", "continual schedule needs at least one segment");
            }
            for s in segments {
                s.validate()?;
            }
        }
        if !(self.pass_through_threshold >= 0.0) {
            return bad("pass_through_threshold", "must be non-negative");
        }
        Ok(())
    }

    /// Base rate after the small-batch rule.
    pub fn scaled_base_lr(&self) -> f64 {
        if self.small_batch_scaling && self.batch_size < 16 {
            self.base_lr * 0.1
        } else {
            self.base_lr
        }
    }

    /// Effective rate of one group: config override, then the selection's
    /// multiplier, then the group default.
    pub fn group_lr(&self, group: ParamGroup, selection: Option<&ParamGroupSelection>) -> f64 {
        let mult = self
            .group_lr_multipliers
            .get(&group)
            .copied()
            .or_else(|| selection.and_then(|s| s.lr_multipliers.get(&group).copied()))
            .unwrap_or_else(|| group.default_lr_multiplier());
        self.scaled_base_lr() * mult
    }
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::default(),
            base_lr: Self::default_lr(),
            group_lr_multipliers: BTreeMap::new(),
            batch_size: Self::default_batch_size(),
            selection: None,
            schedule: Schedule::Episodic,
            steps_per_batch: 1,
            seed: 0,
            norm_mode: NormMode::Batch,
            pass_through_threshold: DEFAULT_PASS_THROUGH_THRESHOLD,
            small_batch_scaling: true,
        }
    }
}
