//! Experiment configuration file and its validation.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use actta::activation::{BaseActivation, Granularity};
use actta::adapt::{AdaptConfig, Schedule, SelectionConfig, SweepGrid};
use actta::network::{MlpArch, NormKind, NormMode, ParamGroup, ParamGroupSelection};
use actta::optim::OptimizerKind;
use actta::pretrain::PretrainConfig;
use actta::shiftgen::{CorruptionKind, CorruptionSpec, DatasetSpec};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives the dataset, initialization, pretraining and adaptation seeds.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub adapt: AdaptSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: default_output_dir(),
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            adapt: AdaptSection::default(),
            sweep: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_samples: usize,
    pub dims: usize,
    pub n_classes: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let r = DatasetSpec::reference(0);
        Self {
            n_samples: r.n_samples,
            dims: r.dims,
            n_classes: r.n_classes,
            class_separation: r.class_separation,
            noise_sigma: r.noise_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub norm: NormKind,
    pub base: BaseActivation,
    pub granularity: Granularity,
    pub positions: usize,
    pub depth_ratio: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let r = MlpArch::reference(1, 2);
        Self {
            hidden_width: r.hidden_width,
            hidden_layers: r.hidden_layers,
            norm: r.norm,
            base: r.base,
            granularity: r.granularity,
            positions: r.positions,
            depth_ratio: r.depth_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            momentum: d.momentum,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Episodic,
    Continual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentEntry {
    pub kind: CorruptionKind,
    pub severity: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    /// `affine`, `actta`, `actta_star`, `custom=g1,g2,...`, or `none` for a
    /// frozen evaluation with running statistics.
    pub groups: String,
    pub schedule: ScheduleKind,
    pub corruption: CorruptionKind,
    pub severity: u8,
    /// Continual segments; empty means every corruption kind in turn at
    /// `severity`.
    pub segments: Vec<SegmentEntry>,
    /// Batches per stream (per segment for continual runs).
    pub batches: usize,
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub group_lr_multipliers: BTreeMap<ParamGroup, f64>,
    pub batch_size: usize,
    pub selection: Option<SelectionConfig>,
    pub steps_per_batch: usize,
    pub norm_mode: NormMode,
    pub pass_through_threshold: f64,
    pub small_batch_scaling: bool,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let d = AdaptConfig::default();
        Self {
            groups: "actta_star".into(),
            schedule: ScheduleKind::Episodic,
            corruption: CorruptionKind::MeanShift,
            severity: 5,
            segments: Vec::new(),
            batches: 50,
            optimizer: d.optimizer,
            base_lr: d.base_lr,
            group_lr_multipliers: d.group_lr_multipliers,
            batch_size: d.batch_size,
            selection: d.selection,
            steps_per_batch: d.steps_per_batch,
            norm_mode: d.norm_mode,
            pass_through_threshold: d.pass_through_threshold,
            small_batch_scaling: d.small_batch_scaling,
        }
    }
}

/// Sweep axes plus the seeds every cell is repeated over. Corruption,
/// severity and stream length come from `[adapt]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub base_lr: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub groups: Vec<String>,
    #[serde(default = "one")]
    pub depth_ratio: Vec<f64>,
    #[serde(default = "channel")]
    pub granularity: Vec<Granularity>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

fn one() -> Vec<f64> {
    vec![1.0]
}
fn channel() -> Vec<Granularity> {
    vec![Granularity::PerChannel]
}

/// Frozen evaluation instead of adaptation.
pub const NO_ADAPTATION: &str = "none";

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> CliError {
    CliError::Validation(format!("invalid {}: {}", field.into(), reason.into()))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.dataset;
        DatasetSpec {
            n_samples: d.n_samples,
            dims: d.dims,
            n_classes: d.n_classes,
            class_separation: d.class_separation,
            noise_sigma: d.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn arch(&self) -> MlpArch {
        let m = &self.model;
        MlpArch {
            input_dims: self.dataset.dims,
            classes: self.dataset.n_classes,
            hidden_width: m.hidden_width,
            hidden_layers: m.hidden_layers,
            norm: m.norm,
            base: m.base,
            granularity: m.granularity,
            positions: m.positions,
            depth_ratio: m.depth_ratio,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            lr: p.lr,
            momentum: p.momentum,
            batch_size: p.batch_size,
            seed: self.seed,
        }
    }

    /// `None` for the frozen baseline.
    pub fn selection(&self) -> Result<Option<ParamGroupSelection>, CliError> {
        if self.adapt.groups == NO_ADAPTATION {
            return Ok(None);
        }
        ParamGroupSelection::parse(&self.adapt.groups)
            .map(Some)
            .map_err(|e| invalid("adapt.groups", e.to_string()))
    }

    pub fn segments(&self) -> Result<Vec<CorruptionSpec>, CliError> {
        let a = &self.adapt;
        let entries: Vec<SegmentEntry> = if a.segments.is_empty() {
            CorruptionKind::ALL
                .iter()
                .map(|&kind| SegmentEntry {
                    kind,
                    severity: a.severity,
                })
                .collect()
        } else {
            a.segments.clone()
        };
        entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                CorruptionSpec::new(e.kind, e.severity, self.seed)
                    .map_err(|err| invalid(format!("adapt.segments[{i}]"), err.to_string()))
            })
            .collect()
    }

    pub fn corruption(&self) -> Result<CorruptionSpec, CliError> {
        CorruptionSpec::new(self.adapt.corruption, self.adapt.severity, self.seed)
            .map_err(|e| invalid("adapt.severity", e.to_string()))
    }

    pub fn adapt_config(&self) -> Result<AdaptConfig, CliError> {
        let a = &self.adapt;
        let schedule = match a.schedule {
            ScheduleKind::Episodic => Schedule::Episodic,
            ScheduleKind::Continual => Schedule::Continual(self.segments()?),
        };
        let cfg = AdaptConfig {
            optimizer: a.optimizer,
            base_lr: a.base_lr,
            group_lr_multipliers: a.group_lr_multipliers.clone(),
            batch_size: a.batch_size,
            selection: a.selection,
            schedule,
            steps_per_batch: a.steps_per_batch,
            seed: self.seed,
            norm_mode: a.norm_mode,
            pass_through_threshold: a.pass_through_threshold,
            small_batch_scaling: a.small_batch_scaling,
        };
        cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(cfg)
    }

    pub fn sweep_grid(&self, section: &SweepSection) -> Result<SweepGrid, CliError> {
        for (i, lr) in section.base_lr.iter().enumerate() {
            if !(*lr >= 0.0 && lr.is_finite()) {
                return Err(invalid(format!("sweep.base_lr[{i}]"), format!("{lr} is not a finite non-negative rate")));
            }
        }
        for (i, bs) in section.batch_size.iter().enumerate() {
            if *bs < 2 && self.adapt.norm_mode == NormMode::Batch && self.model.norm == NormKind::Batch {
                return Err(invalid(format!("sweep.batch_size[{i}]"), "batch statistics need at least 2 samples"));
            }
        }
        for (i, d) in section.depth_ratio.iter().enumerate() {
            if !(0.0..=1.0).contains(d) {
                return Err(invalid(format!("sweep.depth_ratio[{i}]"), format!("{d} is outside [0, 1]")));
            }
        }
        let grid = SweepGrid {
            base_lr: section.base_lr.clone(),
            batch_size: section.batch_size.clone(),
            groups: section.groups.clone(),
            depth_ratio: section.depth_ratio.clone(),
            granularity: section.granularity.clone(),
        };
        grid.cells().map_err(|e| CliError::Validation(format!("{e}").replace("adapt.", "sweep.")))?;
        Ok(grid)
    }

    /// Everything checkable without touching the filesystem.
    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset_spec()
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.arch()
            .layer_specs()
            .map_err(|e| invalid("model", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.model.depth_ratio) {
            return Err(invalid("model.depth_ratio", "must lie in [0, 1]"));
        }
        if self.model.hidden_layers == 0 {
            return Err(invalid("model.hidden_layers", "must be at least 1"));
        }
        self.pretrain_config()
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.selection()?;
        self.corruption()?;
        if self.adapt.batches == 0 {
            return Err(invalid("adapt.batches", "must be at least 1"));
        }
        if self.adapt.batch_size < 2 && self.adapt.norm_mode == NormMode::Batch && self.model.norm == NormKind::Batch {
            return Err(invalid("adapt.batch_size", "batch statistics need at least 2 samples"));
        }
        self.adapt_config()?;
        if let Some(s) = &self.sweep {
            self.sweep_grid(s)?;
        }
        Ok(())
    }
}
