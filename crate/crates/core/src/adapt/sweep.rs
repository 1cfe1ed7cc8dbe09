//! Factorial sweeps over learning rate, batch size, parameter groups,
//! depth ratio and granularity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use super::engine::run_episode;
use super::metrics::StepStatus;
use super::{AdaptConfig, AdaptError};
use crate::activation::Granularity;
use crate::network::{Model, ParamGroupSelection};
use crate::shiftgen::{build_stream, CorruptionSpec, LabeledBatch};

pub const SWEEP_COLUMNS: [&str; 17] = [
    "run_id",
    "groups",
    "base_lr",
    "batch_size",
    "depth_ratio",
    "granularity",
    "seed",
    "batches",
    "target_error",
    "mean_entropy",
    "selected_fraction",
    "pass_through_ratio",
    "activation_params",
    "trainable_params",
    "wall_time_s",
    "status",
    "error",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub base_lr: Vec<f64>,
    pub batch_size: Vec<usize>,
    /// Selection names as accepted by [`ParamGroupSelection::parse`].
    pub groups: Vec<String>,
    #[serde(default = "default_depths")]
    pub depth_ratio: Vec<f64>,
    #[serde(default = "default_granularities")]
    pub granularity: Vec<Granularity>,
}

fn default_depths() -> Vec<f64> {
    vec![1.0]
}
fn default_granularities() -> Vec<Granularity> {
    vec![Granularity::PerChannel]
}

impl SweepGrid {
    /// Every combination, ordered lr → batch → groups → depth → granularity.
    pub fn cells(&self) -> Result<Vec<SweepCell>, AdaptError> {
        let axes = [
            ("base_lr", self.base_lr.len()),
            ("batch_size", self.batch_size.len()),
            ("groups", self.groups.len()),
            ("depth_ratio", self.depth_ratio.len()),
            ("granularity", self.granularity.len()),
        ];
        if let Some((field, _)) = axes.iter().find(|(_, n)| *n == 0) {
            return Err(AdaptError::InvalidConfig {
                field,
                reason: "sweep axis is empty".into(),
            });
        }
        let mut selections = Vec::new();
        for (i, g) in self.groups.iter().enumerate() {
            let sel = ParamGroupSelection::parse(g).map_err(|e| AdaptError::InvalidConfig {
                field: "groups",
                reason: format!("entry {i} (`{g}`): {e}"),
            })?;
            selections.push((g.clone(), sel));
        }
        let mut cells = Vec::new();
        for &lr in &self.base_lr {
            for &bs in &self.batch_size {
                for (name, sel) in &selections {
                    for &depth in &self.depth_ratio {
                        for &gran in &self.granularity {
                            cells.push(SweepCell {
                                base_lr: lr,
                                batch_size: bs,
                                groups_name: name.clone(),
                                groups: sel.clone(),
                                depth_ratio: depth,
                                granularity: gran,
                            });
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub base_lr: f64,
    pub batch_size: usize,
    pub groups_name: String,
    pub groups: ParamGroupSelection,
    pub depth_ratio: f64,
    pub granularity: Granularity,
}

/// Settings shared by every cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSettings {
    pub corruption: Option<CorruptionSpec>,
    pub batches: usize,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses the rayon default.
    pub threads: usize,
}

impl SweepSettings {
    /// The stream a cell sees. It depends only on the seed and batch size,
    /// so cells that differ in other axes are compared on identical data.
    pub fn stream(&self, pool: &LabeledBatch, batch_size: usize, seed: u64) -> Result<Vec<LabeledBatch>, AdaptError> {
        let corruption = self.corruption.map(|c| CorruptionSpec { seed, ..c });
        let stream_seed = seed.wrapping_mul(1_000_003).wrapping_add(batch_size as u64);
        Ok(build_stream(pool, corruption.as_ref(), batch_size, self.batches, stream_seed)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub run_id: String,
    pub cell: SweepCell,
    pub seed: u64,
    /// Batches actually adapted on.
    pub batches: usize,
    pub target_error: f64,
    pub mean_entropy: f64,
    pub selected_fraction: f64,
    pub pass_through_ratio: f64,
    pub activation_params: usize,
    pub trainable_params: usize,
    pub wall_time_s: f64,
    /// `None` when the cell ran to completion.
    pub error: Option<String>,
}

impl SweepRow {
    pub fn status(&self) -> &'static str {
        if self.error.is_some() {
            "error"
        } else {
            "ok"
        }
    }
}

/// The model and config one cell runs with.
pub fn prepare_cell(model: &Model, base: &AdaptConfig, cell: &SweepCell) -> Result<(Model, AdaptConfig), AdaptError> {
    let mut m = model.clone();
    m.set_granularity(cell.granularity)?;
    m.set_depth_ratio(cell.depth_ratio)?;
    m.set_trainable(&cell.groups)?;
    let cfg = AdaptConfig {
        base_lr: cell.base_lr,
        batch_size: cell.batch_size,
        ..base.clone()
    };
    cfg.validate()?;
    Ok((m, cfg))
}

fn run_cell(model: &Model, pool: &LabeledBatch, base: &AdaptConfig, settings: &SweepSettings, cell: &SweepCell, seed: u64) -> SweepRow {
    let run_id = format!("{}/seed{seed}", cell.groups_name);
    let mut row = SweepRow {
        run_id: run_id.clone(),
        cell: cell.clone(),
        seed,
        batches: 0,
        target_error: f64::NAN,
        mean_entropy: f64::NAN,
        selected_fraction: f64::NAN,
        pass_through_ratio: f64::NAN,
        activation_params: 0,
        trainable_params: 0,
        wall_time_s: 0.0,
        error: None,
    };
    let result = (|| {
        let (mut m, cfg) = prepare_cell(model, base, cell)?;
        row.activation_params = m.activation_param_count();
        row.trainable_params = m.trainable_param_ids().iter().map(|&id| m.param(id).len()).sum();
        let stream = settings.stream(pool, cell.batch_size, seed)?;
        let corruption = settings.corruption.map(|c| CorruptionSpec { seed, ..c });
        run_episode(&mut m, &stream, corruption, &cfg, &run_id)
    })();
    match result {
        Ok(run) => {
            let n = run.records.len().max(1) as f64;
            let avg = |f: fn(&super::StepRecord) -> f64| run.records.iter().map(f).sum::<f64>() / n;
            row.batches = run.records.len();
            row.target_error = run.mean_target_error();
            row.mean_entropy = avg(|r| r.mean_entropy);
            row.selected_fraction = avg(|r| r.selected_fraction);
            row.pass_through_ratio = avg(|r| r.pass_through_ratio);
            row.wall_time_s = run.records.iter().map(|r| r.step_wall_time_s).sum();
            let aborted = run.count(StepStatus::Aborted);
            if aborted > 0 {
                row.error = Some(format!("{aborted} steps aborted on non-finite values"));
            }
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Runs every (cell, seed) pair. Failing cells are reported in their row;
/// only an invalid grid fails the whole sweep. Row order is independent
/// of thread count.
pub fn sweep(
    model: &Model,
    pool: &LabeledBatch,
    grid: &SweepGrid,
    base: &AdaptConfig,
    settings: &SweepSettings,
) -> Result<Vec<SweepRow>, AdaptError> {
    let cells = grid.cells()?;
    if settings.seeds.is_empty() {
        return Err(AdaptError::InvalidConfig {
            field: "seeds",
            reason: "at least one seed is required".into(),
        });
    }
    let jobs: Vec<(&SweepCell, u64)> = cells
        .iter()
        .flat_map(|c| settings.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pool_threads = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.threads)
        .build()
        .map_err(|e| AdaptError::Contract(format!("thread pool: {e}")))?;
    Ok(pool_threads.install(|| {
        jobs.par_iter()
            .map(|(cell, seed)| run_cell(model, pool, base, settings, cell, *seed))
            .collect()
    }))
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<(), AdaptError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        out.write_record([
            r.run_id.clone(),
            r.cell.groups_name.clone(),
            r.cell.base_lr.to_string(),
            r.cell.batch_size.to_string(),
            r.cell.depth_ratio.to_string(),
            r.cell.granularity.to_string(),
            r.seed.to_string(),
            r.batches.to_string(),
            r.target_error.to_string(),
            r.mean_entropy.to_string(),
            r.selected_fraction.to_string(),
            r.pass_through_ratio.to_string(),
            r.activation_params.to_string(),
            r.trainable_params.to_string(),
            r.wall_time_s.to_string(),
            r.status().to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
