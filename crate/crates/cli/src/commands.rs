//! The five subcommands. Each validates its whole configuration before it
//! creates a directory or writes a file.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use actta::adapt::{
    evaluate_stream, report, run_continual, run_episode, sweep, write_metrics_csv, write_sweep_csv, AdaptConfig,
    RunMetrics, Segment, StepStatus, SweepRow, SweepSettings,
};
use actta::network::{Layer, Model, NormMode};
use actta::pretrain::{error_rate, pretrain};
use actta::shiftgen::{self, build_stream, DatasetSpec, LabeledBatch};

use crate::config::{ExperimentConfig, ScheduleKind, SweepSection};
use crate::CliError;

/// File layout under `output_dir`.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("data").join("train.acds")
    }
    pub fn test(&self) -> PathBuf {
        self.root.join("data").join("test.acds")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.toml")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.acta")
    }
    pub fn adapt_dir(&self) -> PathBuf {
        self.root.join("adapt")
    }
    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: DatasetSpec,
    pub train_samples: usize,
    pub test_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_error: f64,
    pub source_test_error: f64,
}

fn runtime(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{context}: {e}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| runtime(&format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| runtime(&format!("writing {}", path.display()), e))
}

fn load_data(path: &Path) -> Result<LabeledBatch, CliError> {
    shiftgen::load(path).map_err(|e| runtime(&format!("loading {} (run gen-data first?)", path.display()), e))
}

fn load_manifest(layout: &Layout) -> Result<Manifest, CliError> {
    let path = layout.manifest();
    let text = fs::read_to_string(&path).map_err(|e| runtime(&format!("reading {}", path.display()), e))?;
    toml::from_str(&text).map_err(|e| runtime(&format!("parsing {}", path.display()), e))
}

fn check_data(cfg: &ExperimentConfig, batch: &LabeledBatch, path: &Path) -> Result<(), CliError> {
    if batch.dims() != cfg.dataset.dims || batch.classes != cfg.dataset.n_classes {
        return Err(CliError::Runtime(format!(
            "{} holds {} dims / {} classes but the config expects {} / {}",
            path.display(),
            batch.dims(),
            batch.classes,
            cfg.dataset.dims,
            cfg.dataset.n_classes
        )));
    }
    Ok(())
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let spec = cfg.dataset_spec();
    let (train, test) = shiftgen::generate(&spec).map_err(|e| runtime("generating data", e))?;
    write_file(&layout.train(), &shiftgen::encode(&train))?;
    write_file(&layout.test(), &shiftgen::encode(&test))?;
    let manifest = Manifest {
        dataset: spec,
        train_samples: train.len(),
        test_samples: test.len(),
        pretrain: None,
    };
    write_file(&layout.manifest(), toml::to_string(&manifest).expect("manifest").as_bytes())?;
    write_file(&cfg.output_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(format!(
        "wrote {} train and {} test samples to {}\n",
        train.len(),
        test.len(),
        layout.root.join("data").display()
    ))
}

pub fn pretrain_cmd(cfg: &ExperimentConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let train = load_data(&layout.train())?;
    let test = load_data(&layout.test())?;
    check_data(cfg, &train, &layout.train())?;
    let mut manifest = load_manifest(&layout)?;
    let mut model = Model::from_arch(&cfg.arch(), cfg.seed).map_err(|e| runtime("building model", e))?;
    let report = pretrain(&mut model, &train, &cfg.pretrain_config()).map_err(|e| runtime("pretraining", e))?;
    let test_error = error_rate(&model, &test, NormMode::Running).map_err(|e| runtime("evaluating", e))?;
    let mut bytes = Vec::new();
    model.save_checkpoint(&mut bytes).map_err(|e| runtime("encoding checkpoint", e))?;
    write_file(&layout.model(), &bytes)?;
    manifest.pretrain = Some(PretrainRecord {
        epochs: report.epochs,
        final_loss: report.final_loss,
        train_error: report.train_error,
        source_test_error: test_error,
    });
    write_file(&layout.manifest(), toml::to_string(&manifest).expect("manifest").as_bytes())?;
    Ok(format!(
        "pretrained {} epochs: final loss {:.6}, train error {:.4}, source test error {:.4}\ncheckpoint: {}\n",
        report.epochs,
        report.final_loss,
        report.train_error,
        test_error,
        layout.model().display()
    ))
}

/// Loads the checkpoint and reshapes it to the configured granularity and
/// depth ratio, failing if the stored architecture differs otherwise.
fn load_model(cfg: &ExperimentConfig, layout: &Layout) -> Result<Model, CliError> {
    let path = layout.model();
    let file = fs::File::open(&path).map_err(|e| runtime(&format!("opening {} (run pretrain first?)", path.display()), e))?;
    let mut model = Model::load_checkpoint(std::io::BufReader::new(file)).map_err(|e| runtime(&format!("loading {}", path.display()), e))?;
    let stored = model.layers().iter().find_map(|l| match l {
        Layer::Activation(p) => Some(p.granularity),
        _ => None,
    });
    if stored != Some(cfg.model.granularity) {
        model
            .set_granularity(cfg.model.granularity)
            .map_err(|e| runtime("setting granularity", e))?;
    }
    model
        .set_depth_ratio(cfg.model.depth_ratio)
        .map_err(|e| runtime("setting depth ratio", e))?;
    let want = cfg.arch().layer_specs().map_err(|e| runtime("architecture", e))?;
    if model.layer_specs() != want {
        return Err(CliError::Runtime(format!(
            "checkpoint {} does not match the configured architecture",
            path.display()
        )));
    }
    Ok(model)
}

fn file_label(cfg: &ExperimentConfig) -> String {
    let a = &cfg.adapt;
    let what = match a.schedule {
        ScheduleKind::Episodic => format!("episodic_{}{}", a.corruption, a.severity),
        ScheduleKind::Continual => "continual".to_string(),
    };
    let groups: String = a
        .groups
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
        .collect();
    format!("{groups}_{what}_seed{}", cfg.seed)
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Human-readable run summary; continual runs get a Target/Source table
/// with one column per segment.
pub fn summarize_run(run: &RunMetrics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {}\n", run.run_id);
    let _ = writeln!(out, "- schedule: {}", run.schedule_kind);
    let _ = writeln!(
        out,
        "- batches: {} (ok {}, skipped {}, aborted {}, frozen {})",
        run.records.len(),
        run.count(StepStatus::Ok),
        run.count(StepStatus::Skipped),
        run.count(StepStatus::Aborted),
        run.count(StepStatus::Frozen)
    );
    let _ = writeln!(out, "- mean target error: {}%", pct(run.mean_target_error()));
    if let Some(s) = run.initial_source_error {
        let _ = writeln!(out, "- source error before adaptation: {}%", pct(s));
    }
    let final_source = run
        .final_source_error()
        .or_else(|| run.records.iter().rev().find_map(|r| r.source_error));
    if let Some(s) = final_source {
        let _ = writeln!(out, "- final source error: {}%", pct(s));
    }
    if !run.segments.is_empty() {
        let n = run.segments.len() as f64;
        let names: Vec<String> = run
            .segments
            .iter()
            .map(|s| format!("{}-{}", s.corruption.kind, s.corruption.severity))
            .collect();
        let _ = writeln!(out, "\n| | {} | Mean |", names.join(" | "));
        let _ = writeln!(out, "|---|{}---|", "---|".repeat(names.len()));
        let target: Vec<String> = run.segments.iter().map(|s| pct(s.target_error)).collect();
        let source: Vec<String> = run.segments.iter().map(|s| pct(s.source_error)).collect();
        let mt = run.segments.iter().map(|s| s.target_error).sum::<f64>() / n;
        let ms = run.segments.iter().map(|s| s.source_error).sum::<f64>() / n;
        let _ = writeln!(out, "| Target | {} | {} |", target.join(" | "), pct(mt));
        let _ = writeln!(out, "| Source | {} | {} |", source.join(" | "), pct(ms));
    }
    out
}

pub fn adapt_cmd(cfg: &ExperimentConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let selection = cfg.selection()?;
    let adapt_cfg = cfg.adapt_config()?;
    let layout = Layout::new(&cfg.output_dir);
    let test = load_data(&layout.test())?;
    check_data(cfg, &test, &layout.test())?;
    let mut model = load_model(cfg, &layout)?;
    let run_id = format!("{}/seed{}", cfg.adapt.groups, cfg.seed);
    let fail = |e: actta::adapt::AdaptError| runtime("adaptation", e);

    let run = match (cfg.adapt.schedule, &selection) {
        (ScheduleKind::Episodic, _) => {
            let corruption = cfg.corruption()?;
            let stream = build_stream(&test, Some(&corruption), cfg.adapt.batch_size, cfg.adapt.batches, cfg.seed)
                .map_err(|e| runtime("building stream", e))?;
            let before = error_rate(&model, &test, NormMode::Running).map_err(|e| runtime("source probe", e))?;
            let mut run = match &selection {
                Some(sel) => {
                    model.set_trainable(sel).map_err(|e| CliError::Validation(e.to_string()))?;
                    run_episode(&mut model, &stream, Some(corruption), &adapt_cfg, &run_id).map_err(fail)?
                }
                None => {
                    let frozen = AdaptConfig {
                        norm_mode: NormMode::Running,
                        ..adapt_cfg.clone()
                    };
                    let mut r = evaluate_stream(&model, &stream, Some(corruption), &frozen, &run_id).map_err(fail)?;
                    r.schedule_kind = "episodic".into();
                    r
                }
            };
            let after = error_rate(&model, &test, NormMode::Running).map_err(|e| runtime("source probe", e))?;
            run.initial_source_error = Some(before);
            if let Some(last) = run.records.last_mut() {
                last.source_error = Some(after);
            }
            run
        }
        (ScheduleKind::Continual, Some(sel)) => {
            let segments = Segment::build_all(&test, &cfg.segments()?, cfg.adapt.batch_size, cfg.adapt.batches, cfg.seed)
                .map_err(fail)?;
            model.set_trainable(sel).map_err(|e| CliError::Validation(e.to_string()))?;
            run_continual(&mut model, &segments, &adapt_cfg, &test, &run_id).map_err(fail)?
        }
        (ScheduleKind::Continual, None) => {
            let segments = Segment::build_all(&test, &cfg.segments()?, cfg.adapt.batch_size, cfg.adapt.batches, cfg.seed)
                .map_err(fail)?;
            let frozen = AdaptConfig {
                norm_mode: NormMode::Running,
                ..adapt_cfg.clone()
            };
            let source = error_rate(&model, &test, NormMode::Running).map_err(|e| runtime("source probe", e))?;
            let mut run = RunMetrics::new(run_id.clone(), "continual");
            run.initial_source_error = Some(source);
            for seg in &segments {
                let mut part = evaluate_stream(&model, &seg.stream, Some(seg.corruption), &frozen, &run_id).map_err(fail)?;
                let offset = run.records.len();
                part.records.iter_mut().for_each(|r| r.batch_index += offset);
                if let Some(last) = part.records.last_mut() {
                    last.source_error = Some(source);
                }
                run.segments.push(actta::adapt::SegmentSummary {
                    corruption: seg.corruption,
                    target_error: part.mean_target_error(),
                    source_error: source,
                });
                run.records.extend(part.records);
            }
            run
        }
    };

    let dir = layout.adapt_dir();
    let label = file_label(cfg);
    let mut csv = Vec::new();
    write_metrics_csv(std::slice::from_ref(&run), &mut csv).map_err(|e| runtime("writing metrics", e))?;
    let csv_path = dir.join(format!("{label}.csv"));
    write_file(&csv_path, &csv)?;
    let summary = summarize_run(&run);
    write_file(&dir.join(format!("{label}.md")), summary.as_bytes())?;
    Ok(format!("{summary}\nmetrics: {}\n", csv_path.display()))
}

/// `ACTTA_THREADS`, if set, caps sweep parallelism.
pub fn thread_cap() -> Result<usize, CliError> {
    match std::env::var("ACTTA_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Validation(format!("invalid ACTTA_THREADS: `{v}` is not a positive integer"))),
        },
        Err(_) => Ok(0),
    }
}

pub fn load_grid(path: &Path) -> Result<SweepSection, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("cannot read grid {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Validation(format!("grid {}: {e}", path.display())))
}

fn pivot(rows: &[SweepRow]) -> String {
    type Axis = (&'static str, fn(&SweepRow) -> String);
    let axes: [Axis; 5] = [
        ("base_lr", |r| r.cell.base_lr.to_string()),
        ("batch_size", |r| r.cell.batch_size.to_string()),
        ("groups", |r| r.cell.groups_name.clone()),
        ("depth_ratio", |r| format!("{:.4}", r.cell.depth_ratio)),
        ("granularity", |r| r.cell.granularity.to_string()),
    ];
    let mut groups: Vec<String> = Vec::new();
    for r in rows {
        if !groups.contains(&r.cell.groups_name) {
            groups.push(r.cell.groups_name.clone());
        }
    }
    let mut out = String::new();
    for (name, key) in axes.iter().filter(|(n, _)| *n != "groups") {
        let mut values: Vec<String> = Vec::new();
        for r in rows {
            let v = key(r);
            if !values.contains(&v) {
                values.push(v);
            }
        }
        if values.len() < 2 && groups.len() < 2 {
            continue;
        }
        let _ = writeln!(out, "### mean target error (%) by {name}\n");
        let _ = writeln!(out, "| {name} | {} |", groups.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(groups.len()));
        for v in &values {
            let mut cells = Vec::new();
            for g in &groups {
                let sel: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.error.is_none() && &key(r) == v && &r.cell.groups_name == g)
                    .map(|r| r.target_error)
                    .collect();
                cells.push(if sel.is_empty() {
                    "n/a".to_string()
                } else {
                    pct(sel.iter().sum::<f64>() / sel.len() as f64)
                });
            }
            let _ = writeln!(out, "| {v} | {} |", cells.join(" | "));
        }
        out.push('\n');
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let _ = writeln!(out, "{} cells, {} failed", rows.len(), failed);
    out
}

pub fn sweep_cmd(cfg: &ExperimentConfig, grid_path: Option<&Path>) -> Result<String, CliError> {
    let section = match grid_path {
        Some(p) => load_grid(p)?,
        None => cfg
            .sweep
            .clone()
            .ok_or_else(|| CliError::Validation("no sweep grid: add a [sweep] table or pass --grid".into()))?,
    };
    cfg.validate()?;
    let grid = cfg.sweep_grid(&section)?;
    let threads = thread_cap()?;
    let base = cfg.adapt_config()?;
    let settings = SweepSettings {
        corruption: Some(cfg.corruption()?),
        batches: cfg.adapt.batches,
        seeds: if section.seeds.is_empty() { vec![cfg.seed] } else { section.seeds.clone() },
        threads,
    };
    let layout = Layout::new(&cfg.output_dir);
    let test = load_data(&layout.test())?;
    check_data(cfg, &test, &layout.test())?;
    let model = load_model(cfg, &layout)?;
    let rows = sweep(&model, &test, &grid, &base, &settings).map_err(|e| runtime("sweep", e))?;
    let mut csv = Vec::new();
    write_sweep_csv(&rows, &mut csv).map_err(|e| runtime("writing sweep", e))?;
    let dir = layout.sweep_dir();
    write_file(&dir.join("sweep.csv"), &csv)?;
    let table = pivot(&rows);
    write_file(&dir.join("sweep.md"), table.as_bytes())?;
    Ok(format!("{table}\nsweep: {}\n", dir.join("sweep.csv").display()))
}

pub fn report_cmd(paths: &[PathBuf], out: Option<&Path>) -> Result<String, CliError> {
    if paths.is_empty() {
        return Err(CliError::Validation("report needs at least one metrics CSV".into()));
    }
    let mut inputs = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| runtime(&format!("reading {}", p.display()), e))?;
        inputs.push((p.display().to_string(), text));
    }
    let text = report::report(&inputs).map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(dir) = out {
        write_file(&dir.join("report.md"), text.as_bytes())?;
    }
    Ok(text)
}
