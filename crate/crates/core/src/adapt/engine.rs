//! The online adaptation loop.

use super::metrics::{RunMetrics, SegmentSummary, StepRecord, StepStatus};
use super::objective::{entropy_loss, select_samples};
use super::{AdaptConfig, AdaptError};
use crate::activation::input_derivative;
use crate::loss::entropy;
use crate::network::{Layer, Model, NormMode, ParamId};
use crate::optim::Optimizer;
use crate::pretrain::{error_rate, misclassified};
use crate::shiftgen::{build_stream, CorruptionSpec, LabeledBatch};
use crate::tensor::{Tape, Tensor};

/// Derivative magnitude above which an activation input counts as passing
/// gradient.
pub const DEFAULT_PASS_THROUGH_THRESHOLD: f64 = 1e-3;

#[cfg(not(target_arch = "wasm32"))]
struct Clock(std::time::Instant);

#[cfg(not(target_arch = "wasm32"))]
impl Clock {
    fn start() -> Self {
        Self(std::time::Instant::now())
    }
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

// No monotonic clock on the bare wasm target.
#[cfg(target_arch = "wasm32")]
struct Clock;

#[cfg(target_arch = "wasm32")]
impl Clock {
    fn start() -> Self {
        Self
    }
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// Statistics of the pre-update forward pass.
struct Observation {
    target_error: f64,
    mean_entropy: f64,
    selected_fraction: f64,
    weights: Option<Vec<f64>>,
    layer_pass_through: Vec<f64>,
}

fn observe(model: &Model, logits: &Tensor, act_inputs: &[(usize, Tensor)], batch: &LabeledBatch, config: &AdaptConfig) -> Result<Observation, AdaptError> {
    let classes = logits.cols();
    let max_h = (classes as f64).ln();
    let n = logits.rows();
    let mean_entropy = ((0..n).map(|i| entropy(logits.row(i))).sum::<f64>() / n as f64).clamp(0.0, max_h);
    let (selected_fraction, weights) = match &config.selection {
        Some(sel) => {
            let s = select_samples(logits, sel.e0_factor, sel.weighting);
            (s.fraction(), Some(s.weights))
        }
        None => (1.0, None),
    };
    let mut layer_pass_through = Vec::with_capacity(act_inputs.len());
    for (layer, x) in act_inputs {
        let Layer::Activation(p) = &model.layers()[*layer] else {
            return Err(AdaptError::Contract(format!("layer {layer} is not an activation")));
        };
        layer_pass_through.push(passing_fraction(&input_derivative(x, p)?, config.pass_through_threshold));
    }
    Ok(Observation {
        target_error: misclassified(logits.data(), classes, &batch.y),
        mean_entropy,
        selected_fraction,
        weights,
        layer_pass_through,
    })
}

fn passing_fraction(d: &Tensor, tau: f64) -> f64 {
    d.data().iter().filter(|v| v.abs() > tau).count() as f64 / d.len() as f64
}

fn mean_or_zero(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Fraction of activation-input elements with `|d_x| > tau`, one entry per
/// activation layer.
pub fn pass_through_ratio(model: &Model, x: &Tensor, mode: NormMode, tau: f64) -> Result<Vec<f64>, AdaptError> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, x, mode)?;
    let mut out = Vec::with_capacity(pass.activation_inputs.len());
    for (layer, v) in &pass.activation_inputs {
        if let Layer::Activation(p) = &model.layers()[*layer] {
            out.push(passing_fraction(&input_derivative(&tape.tensor(*v), p)?, tau));
        }
    }
    Ok(out)
}

enum Update {
    Applied,
    NoSelection,
    NonFinite,
}

/// One forward, backward and optimizer update. Parameters are untouched
/// unless the result is [`Update::Applied`].
fn update_once(
    model: &mut Model,
    opt: &mut Optimizer,
    tape: &mut Tape,
    pass: &crate::network::ForwardPass,
    weights: Option<&[f64]>,
    config: &AdaptConfig,
) -> Result<Update, AdaptError> {
    let loss = match entropy_loss(tape, pass.logits, weights) {
        Ok(l) => l,
        Err(AdaptError::NoSelectedSamples) => return Ok(Update::NoSelection),
        Err(e) => return Err(e),
    };
    if !tape.value(loss)[0].is_finite() {
        return Ok(Update::NonFinite);
    }
    let grads = tape.backward(loss)?;
    let mut updates: Vec<(ParamId, Vec<f64>)> = Vec::new();
    for (id, v) in &pass.params {
        if !model.is_trainable(*id) {
            continue;
        }
        if let Some(g) = grads.get(*v) {
            if g.iter().any(|x| !x.is_finite()) {
                return Ok(Update::NonFinite);
            }
            updates.push((*id, g.to_vec()));
        }
    }
    let selection = model.selection().cloned();
    opt.step(model, &updates, |id| config.group_lr(id.field.group(), selection.as_ref()));
    Ok(Update::Applied)
}

/// Predict-then-adapt on one batch: metrics come from the forward pass
/// taken before any update.
pub fn adapt_step(model: &mut Model, opt: &mut Optimizer, batch: &LabeledBatch, config: &AdaptConfig) -> Result<StepRecord, AdaptError> {
    if model.trainable_param_ids().is_empty() {
        return Err(AdaptError::NothingTrainable);
    }
    let clock = Clock::start();
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &batch.x, config.norm_mode)?;
    let logits = tape.tensor(pass.logits);
    let act_inputs: Vec<(usize, Tensor)> = pass
        .activation_inputs
        .iter()
        .map(|(l, v)| (*l, tape.tensor(*v)))
        .collect();
    let obs = observe(model, &logits, &act_inputs, batch, config)?;

    let mut status = match update_once(model, opt, &mut tape, &pass, obs.weights.as_deref(), config)? {
        Update::Applied => StepStatus::Ok,
        Update::NoSelection => StepStatus::Skipped,
        Update::NonFinite => StepStatus::Aborted,
    };
    for _ in 1..config.steps_per_batch {
        if status != StepStatus::Ok {
            break;
        }
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &batch.x, config.norm_mode)?;
        let logits = tape.tensor(pass.logits);
        let weights = config
            .selection
            .map(|s| select_samples(&logits, s.e0_factor, s.weighting).weights);
        if let Update::NonFinite = update_once(model, opt, &mut tape, &pass, weights.as_deref(), config)? {
            status = StepStatus::Aborted;
        }
    }
    Ok(StepRecord {
        batch_index: 0,
        corruption: None,
        target_error: obs.target_error,
        mean_entropy: obs.mean_entropy,
        selected_fraction: obs.selected_fraction,
        pass_through_ratio: mean_or_zero(&obs.layer_pass_through),
        layer_pass_through: obs.layer_pass_through,
        source_error: None,
        step_wall_time_s: clock.seconds(),
        status,
    })
}

/// Scores a stream without adapting; every record has status `frozen`.
pub fn evaluate_stream(
    model: &Model,
    stream: &[LabeledBatch],
    corruption: Option<CorruptionSpec>,
    config: &AdaptConfig,
    run_id: &str,
) -> Result<RunMetrics, AdaptError> {
    let mut run = RunMetrics::new(run_id, config.schedule.kind());
    for (i, batch) in stream.iter().enumerate() {
        let clock = Clock::start();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &batch.x, config.norm_mode)?;
        let logits = tape.tensor(pass.logits);
        let act_inputs: Vec<(usize, Tensor)> = pass
            .activation_inputs
            .iter()
            .map(|(l, v)| (*l, tape.tensor(*v)))
            .collect();
        let obs = observe(model, &logits, &act_inputs, batch, config)?;
        run.records.push(StepRecord {
            batch_index: i,
            corruption,
            target_error: obs.target_error,
            mean_entropy: obs.mean_entropy,
            selected_fraction: obs.selected_fraction,
            pass_through_ratio: mean_or_zero(&obs.layer_pass_through),
            layer_pass_through: obs.layer_pass_through,
            source_error: None,
            step_wall_time_s: clock.seconds(),
            status: StepStatus::Frozen,
        });
    }
    Ok(run)
}

/// Adapts `model` over `stream` in order. The model passed in is the
/// episode's starting point and is left in its adapted state; callers that
/// run several episodes start each one from a fresh copy.
pub fn run_episode(
    model: &mut Model,
    stream: &[LabeledBatch],
    corruption: Option<CorruptionSpec>,
    config: &AdaptConfig,
    run_id: &str,
) -> Result<RunMetrics, AdaptError> {
    config.validate()?;
    if model.trainable_param_ids().is_empty() {
        return Err(AdaptError::NothingTrainable);
    }
    let mut opt = Optimizer::new(config.optimizer);
    let mut run = RunMetrics::new(run_id, "episodic");
    for (i, batch) in stream.iter().enumerate() {
        let mut rec = adapt_step(model, &mut opt, batch, config)?;
        rec.batch_index = i;
        rec.corruption = corruption;
        run.records.push(rec);
    }
    Ok(run)
}

/// One corruption of a continual schedule with its batches.
#[derive(Clone, Debug)]
pub struct Segment {
    pub corruption: CorruptionSpec,
    pub stream: Vec<LabeledBatch>,
}

impl Segment {
    /// Segments for `specs`, each drawn from `pool` with its own stream seed.
    pub fn build_all(
        pool: &LabeledBatch,
        specs: &[CorruptionSpec],
        batch_size: usize,
        n_batches: usize,
        seed: u64,
    ) -> Result<Vec<Segment>, AdaptError> {
        specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                Ok(Segment {
                    corruption: *spec,
                    stream: build_stream(pool, Some(spec), batch_size, n_batches, seed.wrapping_add(i as u64))?,
                })
            })
            .collect()
    }
}

/// Adapts through every segment without resetting model or optimizer.
/// After each segment the source probe is scored in eval mode; that error
/// is attached to the segment's last record.
pub fn run_continual(
    model: &mut Model,
    segments: &[Segment],
    config: &AdaptConfig,
    source_probe: &LabeledBatch,
    run_id: &str,
) -> Result<RunMetrics, AdaptError> {
    config.validate()?;
    if model.trainable_param_ids().is_empty() {
        return Err(AdaptError::NothingTrainable);
    }
    let mut opt = Optimizer::new(config.optimizer);
    let mut run = RunMetrics::new(run_id, "continual");
    run.initial_source_error = Some(error_rate(model, source_probe, NormMode::Running)?);
    let mut index = 0;
    for seg in segments {
        let start = run.records.len();
        for batch in &seg.stream {
            let mut rec = adapt_step(model, &mut opt, batch, config)?;
            rec.batch_index = index;
            rec.corruption = Some(seg.corruption);
            run.records.push(rec);
            index += 1;
        }
        let source_error = error_rate(model, source_probe, NormMode::Running)?;
        let seg_records = &run.records[start..];
        let target_error = seg_records.iter().map(|r| r.target_error).sum::<f64>() / seg_records.len().max(1) as f64;
        if let Some(last) = run.records.last_mut().filter(|_| !seg.stream.is_empty()) {
            last.source_error = Some(source_error);
        }
        run.segments.push(SegmentSummary {
            corruption: seg.corruption,
            target_error,
            source_error,
        });
    }
    Ok(run)
}
