//! Aggregation of metrics CSVs into method × corruption tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

use super::metrics::{StepStatus, METRICS_COLUMNS};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{source_name}: column `{column}`: {reason}")]
    Schema {
        source_name: String,
        column: String,
        reason: String,
    },
    #[error("{source_name}: {err}")]
    Csv { source_name: String, err: csv::Error },
    #[error("no metrics rows to report")]
    Empty,
}

/// One parsed line of a metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub schedule_kind: String,
    pub corruption_kind: String,
    pub severity: u8,
    pub batch_index: usize,
    pub target_error: f64,
    pub mean_entropy: f64,
    pub selected_fraction: f64,
    pub pass_through_ratio: f64,
    pub source_error: Option<f64>,
    pub step_wall_time_s: f64,
    pub status: StepStatus,
}

impl MetricsRow {
    /// Method label: the run id up to its first `/`.
    pub fn method(&self) -> &str {
        self.run_id.split('/').next().unwrap_or(&self.run_id)
    }
}

/// Parses a metrics CSV, checking the header against [`METRICS_COLUMNS`].
pub fn read_metrics_csv(text: &str, source_name: &str) -> Result<Vec<MetricsRow>, ReportError> {
    let csv_err = |err| ReportError::Csv {
        source_name: source_name.to_string(),
        err,
    };
    let schema = |column: &str, reason: String| ReportError::Schema {
        source_name: source_name.to_string(),
        column: column.to_string(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_err)?.clone();
    for (i, want) in METRICS_COLUMNS.iter().enumerate() {
        match header.get(i) {
            Some(got) if got == *want => {}
            Some(got) => return Err(schema(want, format!("expected at position {i}, found `{got}`"))),
            None => return Err(schema(want, "missing".into())),
        }
    }
    if let Some(extra) = header.get(METRICS_COLUMNS.len()) {
        return Err(schema(extra, "unexpected column".into()));
    }

    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != METRICS_COLUMNS.len() {
            return Err(schema(
                METRICS_COLUMNS[rec.len().min(METRICS_COLUMNS.len() - 1)],
                format!("row {} has {} fields", line + 1, rec.len()),
            ));
        }
        let field = |i: usize| &rec[i];
        let parse_f = |i: usize| -> Result<f64, ReportError> {
            field(i)
                .parse::<f64>()
                .map_err(|_| schema(METRICS_COLUMNS[i], format!("row {}: `{}` is not a number", line + 1, field(i))))
        };
        let parse_u = |i: usize| -> Result<usize, ReportError> {
            field(i)
                .parse::<usize>()
                .map_err(|_| schema(METRICS_COLUMNS[i], format!("row {}: `{}` is not an integer", line + 1, field(i))))
        };
        let severity = u8::try_from(parse_u(3)?)
            .map_err(|_| schema("severity", format!("row {}: out of range", line + 1)))?;
        let source_error = if field(9).is_empty() { None } else { Some(parse_f(9)?) };
        let status = StepStatus::parse(field(11))
            .ok_or_else(|| schema("status", format!("row {}: unknown status `{}`", line + 1, field(11))))?;
        rows.push(MetricsRow {
            run_id: field(0).to_string(),
            schedule_kind: field(1).to_string(),
            corruption_kind: field(2).to_string(),
            severity,
            batch_index: parse_u(4)?,
            target_error: parse_f(5)?,
            mean_entropy: parse_f(6)?,
            selected_fraction: parse_f(7)?,
            pass_through_ratio: parse_f(8)?,
            source_error,
            step_wall_time_s: parse_f(10)?,
            status,
        });
    }
    Ok(rows)
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

/// Target and source errors of one (method, corruption, severity) group,
/// aggregated over runs.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub method: String,
    pub corruption: String,
    pub target: Stat,
    pub source: Option<Stat>,
}

fn column_label(kind: &str, severity: u8) -> String {
    if severity == 0 {
        kind.to_string()
    } else {
        format!("{kind}-{severity}")
    }
}

/// Per-run means first (target error averaged over the run's batches for
/// that corruption; source error from the last probed batch), then mean
/// and std across runs. Groups keep first-appearance order.
pub fn summarize(rows: &[MetricsRow]) -> Vec<GroupSummary> {
    type Key = (String, String);
    let mut order: Vec<Key> = Vec::new();
    // group → run → (target values, last source value)
    let mut groups: BTreeMap<Key, Vec<(String, Vec<f64>, Option<f64>)>> = BTreeMap::new();
    for r in rows {
        let key = (r.method().to_string(), column_label(&r.corruption_kind, r.severity));
        let runs = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        let run = match runs.iter_mut().position(|(id, _, _)| *id == r.run_id) {
            Some(i) => &mut runs[i],
            None => {
                runs.push((r.run_id.clone(), Vec::new(), None));
                runs.last_mut().expect("just pushed")
            }
        };
        run.1.push(r.target_error);
        if r.source_error.is_some() {
            run.2 = r.source_error;
        }
    }
    order
        .into_iter()
        .map(|key| {
            let runs = &groups[&key];
            let targets: Vec<f64> = runs.iter().map(|(_, t, _)| t.iter().sum::<f64>() / t.len() as f64).collect();
            let sources: Vec<f64> = runs.iter().filter_map(|(_, _, s)| *s).collect();
            GroupSummary {
                method: key.0,
                corruption: key.1,
                target: Stat::of(&targets),
                source: (!sources.is_empty()).then(|| Stat::of(&sources)),
            }
        })
        .collect()
}

fn table(title: &str, groups: &[GroupSummary], pick: impl Fn(&GroupSummary) -> Option<Stat>) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut columns: Vec<&str> = Vec::new();
    for g in groups.iter().filter(|g| pick(g).is_some()) {
        if !methods.contains(&g.method.as_str()) {
            methods.push(&g.method);
        }
        if !columns.contains(&g.corruption.as_str()) {
            columns.push(&g.corruption);
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "### {title} (%)\n");
    let _ = writeln!(out, "| method | {} | Mean |", columns.join(" | "));
    let _ = writeln!(out, "|---|{}---|", "---|".repeat(columns.len()));
    for m in &methods {
        let mut cells = Vec::new();
        let mut means = Vec::new();
        for c in &columns {
            match groups.iter().find(|g| g.method == *m && g.corruption == *c).and_then(&pick) {
                Some(s) => {
                    means.push(s.mean);
                    cells.push(format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std));
                }
                None => cells.push("n/a".into()),
            }
        }
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        let _ = writeln!(out, "| {m} | {} | {:.2} |", cells.join(" | "), 100.0 * mean);
    }
    out
}

/// Markdown tables (rows = methods, columns = corruptions, final Mean
/// column) for target error and, when probed, source error.
pub fn render(groups: &[GroupSummary]) -> String {
    let mut out = table("Target error", groups, |g| Some(g.target));
    if groups.iter().any(|g| g.source.is_some()) {
        out.push('\n');
        out.push_str(&table("Source error", groups, |g| g.source));
    }
    out
}

/// Parses every input before rendering anything, so one bad file yields an
/// error and no output.
pub fn report(inputs: &[(String, String)]) -> Result<String, ReportError> {
    let mut rows = Vec::new();
    for (name, text) in inputs {
        rows.extend(read_metrics_csv(text, name)?);
    }
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    Ok(render(&summarize(&rows)))
}
