use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_actta");

fn actta(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(BIN);
    c.args(args).env_remove("ACTTA_THREADS");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("cfg.toml");
    fs::write(
        &path,
        format!(
            "output_dir = {:?}\n[dataset]\nn_samples = 400\ndims = 6\nn_classes = 3\n\
             [model]\nhidden_width = 8\n[pretrain]\nepochs = 3\n[adapt]\nbatches = 4\nbatch_size = 16\n",
            dir.join("out")
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn prepared() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert_eq!(actta(&["gen-data", "--config", &cfg], &[]).status.code(), Some(0));
    assert_eq!(actta(&["pretrain", "--config", &cfg], &[]).status.code(), Some(0));
    (dir, cfg)
}

fn strip_wall_time(text: &str, column: &str) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let idx = r.headers().unwrap().iter().position(|h| h == column).unwrap();
    r.records()
        .map(|rec| {
            rec.unwrap()
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != idx)
                .map(|(_, f)| f.to_string())
                .collect()
        })
        .collect()
}

#[test]
fn invalid_config_exits_1_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[dataset]\nn_classes = 1\n").unwrap();
    let o = actta(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset.n_classes"));
    assert!(!out.exists());

    let o = actta(&["adapt", "--severity", "0", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    let o = actta(&["adapt", "--groups", "custom=nope", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = actta(&["pretrain", "--out", dir.path().join("x").to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = actta(&["report", dir.path().join("none.csv").to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_arguments_exit_1_and_help_exits_0() {
    assert_eq!(actta(&["frobnicate"], &[]).status.code(), Some(1));
    assert_eq!(actta(&["adapt", "--granularity", "pixel"], &[]).status.code(), Some(1));
    assert_eq!(actta(&["--help"], &[]).status.code(), Some(0));
}

#[test]
fn adapt_writes_one_row_per_batch_and_reruns_match() {
    let (dir, cfg) = prepared();
    let csv_path = dir.path().join("out/adapt/actta_star_episodic_mean_shift5_seed0.csv");
    assert_eq!(actta(&["adapt", "--config", &cfg], &[]).status.code(), Some(0));
    let first = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(first.lines().count(), 5);
    assert!(first.starts_with(
        "run_id,schedule_kind,corruption_kind,severity,batch_index,target_error,mean_entropy,\
         selected_fraction,pass_through_ratio,source_error,step_wall_time_s,status\n"
    ));
    assert_eq!(actta(&["adapt", "--config", &cfg], &[]).status.code(), Some(0));
    let second = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(strip_wall_time(&first, "step_wall_time_s"), strip_wall_time(&second, "step_wall_time_s"));
}

#[test]
fn continual_run_reports_per_segment_source_error() {
    let (dir, cfg) = prepared();
    let o = actta(&["adapt", "--config", &cfg, "--schedule", "continual", "--groups", "affine"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("out/adapt/affine_continual_seed0.csv")).unwrap();
    let rows = strip_wall_time(&text, "step_wall_time_s");
    assert_eq!(rows.len(), 20);
    let probed: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| !r[9].is_empty())
        .map(|(i, _)| i)
        .collect();
    assert_eq!(probed, vec![3, 7, 11, 15, 19]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("| Source |"));
}

#[test]
fn sweep_is_independent_of_thread_count() {
    let (dir, cfg) = prepared();
    let grid = dir.path().join("grid.toml");
    fs::write(
        &grid,
        "base_lr = [1e-3, 1e-2]\nbatch_size = [16]\ngroups = [\"affine\", \"actta_star\"]\n\
         granularity = [\"layer\", \"channel\", \"element\"]\nseeds = [0, 1]\n",
    )
    .unwrap();
    let g = grid.to_str().unwrap();
    let path = dir.path().join("out/sweep/sweep.csv");
    assert_eq!(actta(&["sweep", "--config", &cfg, "--grid", g], &[("ACTTA_THREADS", "1")]).status.code(), Some(0));
    let one = fs::read_to_string(&path).unwrap();
    assert_eq!(actta(&["sweep", "--config", &cfg, "--grid", g], &[("ACTTA_THREADS", "3")]).status.code(), Some(0));
    let three = fs::read_to_string(&path).unwrap();
    let rows = strip_wall_time(&one, "wall_time_s");
    assert_eq!(rows.len(), 24);
    assert!(rows.iter().all(|r| r[14] == "ok"));
    assert_eq!(rows, strip_wall_time(&three, "wall_time_s"));
    assert_eq!(
        actta(&["sweep", "--config", &cfg, "--grid", g], &[("ACTTA_THREADS", "zero")]).status.code(),
        Some(1)
    );
}

#[test]
fn report_aggregates_and_rejects_bad_schema() {
    let (dir, cfg) = prepared();
    for groups in ["affine", "none"] {
        assert_eq!(actta(&["adapt", "--config", &cfg, "--groups", groups], &[]).status.code(), Some(0));
    }
    let adapt = dir.path().join("out/adapt");
    let a = adapt.join("affine_episodic_mean_shift5_seed0.csv");
    let n = adapt.join("none_episodic_mean_shift5_seed0.csv");
    let rep = dir.path().join("rep");
    let o = actta(
        &["report", a.to_str().unwrap(), n.to_str().unwrap(), "--out", rep.to_str().unwrap()],
        &[],
    );
    assert_eq!(o.status.code(), Some(0));
    let md = fs::read_to_string(rep.join("report.md")).unwrap();
    assert!(md.contains("| affine |") && md.contains("| none |") && md.contains("mean_shift-5"));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "run_id,oops\nx,1\n").unwrap();
    let rep2 = dir.path().join("rep2");
    let o = actta(&["report", a.to_str().unwrap(), bad.to_str().unwrap(), "--out", rep2.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
    assert!(!rep2.exists());
}
