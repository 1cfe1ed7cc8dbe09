//! Per-batch adaptation records and the metrics CSV writer.

use std::fmt;
use std::io::Write;

use super::AdaptError;
use crate::shiftgen::CorruptionSpec;

pub const METRICS_COLUMNS: [&str; 12] = [
    "run_id",
    "schedule_kind",
    "corruption_kind",
    "severity",
    "batch_index",
    "target_error",
    "mean_entropy",
    "selected_fraction",
    "pass_through_ratio",
    "source_error",
    "step_wall_time_s",
    "status",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepStatus {
    /// Parameters were updated.
    Ok,
    /// No sample passed selection; parameters untouched.
    Skipped,
    /// Loss or gradients were not finite; parameters untouched.
    Aborted,
    /// Evaluation only, no adaptation attempted.
    Frozen,
}

impl StepStatus {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::Skipped => "skipped",
            Self::Aborted => "aborted",
            Self::Frozen => "frozen",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Ok, Self::Skipped, Self::Aborted, Self::Frozen]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

impl fmt::Display for StepStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub batch_index: usize,
    pub corruption: Option<CorruptionSpec>,
    /// Error of the prediction made before this batch's update.
    pub target_error: f64,
    pub mean_entropy: f64,
    pub selected_fraction: f64,
    /// Mean over activation layers of [`Self::layer_pass_through`].
    pub pass_through_ratio: f64,
    pub layer_pass_through: Vec<f64>,
    pub source_error: Option<f64>,
    pub step_wall_time_s: f64,
    pub status: StepStatus,
}

/// Target and source error of one continual segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSummary {
    pub corruption: CorruptionSpec,
    pub target_error: f64,
    pub source_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub run_id: String,
    pub schedule_kind: String,
    pub records: Vec<StepRecord>,
    /// Source-probe error before any adaptation, when probed.
    pub initial_source_error: Option<f64>,
    pub segments: Vec<SegmentSummary>,
}

impl RunMetrics {
    pub fn new(run_id: impl Into<String>, schedule_kind: &str) -> Self {
        Self {
            run_id: run_id.into(),
            schedule_kind: schedule_kind.to_string(),
            records: Vec::new(),
            initial_source_error: None,
            segments: Vec::new(),
        }
    }

    pub fn mean_target_error(&self) -> f64 {
        mean(self.records.iter().map(|r| r.target_error))
    }

    /// Mean entropy over records `range` (0-based, end exclusive).
    pub fn mean_entropy(&self, range: std::ops::Range<usize>) -> f64 {
        mean(self.records[range].iter().map(|r| r.mean_entropy))
    }

    pub fn final_source_error(&self) -> Option<f64> {
        self.segments.last().map(|s| s.source_error)
    }

    pub fn count(&self, status: StepStatus) -> usize {
        self.records.iter().filter(|r| r.status == status).count()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Writes a header followed by one row per record of every run.
pub fn write_metrics_csv<W: Write>(runs: &[RunMetrics], w: W) -> Result<(), AdaptError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_COLUMNS)?;
    for run in runs {
        for r in &run.records {
            let (kind, severity) = match &r.corruption {
                Some(c) => (c.kind.name().to_string(), c.severity.to_string()),
                None => ("none".to_string(), "0".to_string()),
            };
            out.write_record([
                run.run_id.clone(),
                run.schedule_kind.clone(),
                kind,
                severity,
                r.batch_index.to_string(),
                r.target_error.to_string(),
                r.mean_entropy.to_string(),
                r.selected_fraction.to_string(),
                r.pass_through_ratio.to_string(),
                r.source_error.map(|v| v.to_string()).unwrap_or_default(),
                r.step_wall_time_s.to_string(),
                r.status.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shiftgen::CorruptionKind;

    #[test]
    fn csv_has_exact_header_and_blank_source_error() {
        let mut run = RunMetrics::new("actta_star/seed0", "episodic");
        run.records.push(StepRecord {
            batch_index: 0,
            corruption: Some(CorruptionSpec::new(CorruptionKind::MeanShift, 5, 1).unwrap()),
            target_error: 0.25,
            mean_entropy: 0.5,
            selected_fraction: 1.0,
            pass_through_ratio: 0.75,
            layer_pass_through: vec![0.75],
            source_error: None,
            step_wall_time_s: 0.001,
            status: StepStatus::Ok,
        });
        let mut buf = Vec::new();
        write_metrics_csv(&[run], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_COLUMNS.join(","));
        assert_eq!(
            lines.next().unwrap(),
            "actta_star/seed0,episodic,mean_shift,5,0,0.25,0.5,1,0.75,,0.001,ok"
        );
    }
}
