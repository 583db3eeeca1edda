use std::fs;
use std::path::{Path, PathBuf};

use contime::data::SynthConfig;
use contime::model::Checkpoint;
use contime::run::*;
use contime::training::LossMode;
use contime::Error;

const T: usize = 16;
const P: usize = 6;

fn synth_csv(dir: &Path) -> PathBuf {
    let path = dir.join("series.csv");
    cmd_synth(&SynthConfig::new(600, 8, 3), &path).unwrap();
    path
}

fn config(data: &Path, out: &Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::new(DataSource::csv(data));
    cfg.train.input_len = T;
    cfg.train.pred_len = P;
    cfg.train.hidden_dim = 6;
    cfg.train.epochs = epochs;
    cfg.train.learning_rate = 0.01;
    cfg.train_stride = 5;
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn eval(ckpt: &Path, data: &Path, out: &Path, split: Split, name: &str) -> EvalArtifacts {
    cmd_eval(&EvalRequest {
        checkpoints: vec![ckpt.to_path_buf()],
        data: DataSource::csv(data),
        split,
        pred_len: Some(P),
        out_dir: out.to_path_buf(),
        name: Some(name.into()),
        keep_samples: false,
    })
    .unwrap()
}

#[test]
fn train_writes_checkpoint_history_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_csv(dir.path());
    let before = fs::read(&data).unwrap();
    let cfg = config(&data, &dir.path().join("out"), 4);
    let a = cmd_train(&cfg).unwrap();
    assert_eq!(fs::read(&data).unwrap(), before);
    assert!(a.checkpoint.ends_with(format!("series_P{P}_seed0_task-delta.checkpoint.json")));
    assert_eq!(fs::read_to_string(&a.history).unwrap().lines().count(), 4);
    let ckpt = Checkpoint::load(&a.checkpoint).unwrap();
    assert_eq!(ckpt.params, a.outcome.best);
    assert_eq!(ckpt.config_hash, cfg.hash().unwrap());
    assert!(ckpt.norm_stats.is_some());

    // the snapshot alone reproduces the run
    let snap = RunConfig::from_json_file(&a.config).unwrap();
    assert_eq!(snap, cfg);
    let again = cmd_train(&RunConfig { out_dir: dir.path().join("again"), ..snap }).unwrap();
    assert_eq!(fs::read(&a.history).unwrap(), fs::read(&again.history).unwrap());
    assert_eq!(fs::read(&a.checkpoint).unwrap(), fs::read(&again.checkpoint).unwrap());
}

#[test]
fn invalid_coefficients_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_csv(dir.path());
    let mut cfg = config(&data, dir.path(), 1);
    cfg.loss.alpha = 0.0;
    cfg.loss.beta = 0.0;
    assert!(matches!(cmd_train(&cfg), Err(Error::Config(_))));
    assert!(!dir.path().join(format!("{}.checkpoint.json", cfg.stem())).exists());
}

#[test]
fn missing_data_is_a_file_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir.path().join("nope.csv"), dir.path(), 1);
    assert!(matches!(cmd_train(&cfg), Err(Error::File { .. })));
}

#[test]
fn eval_beats_the_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_csv(dir.path());
    let trained = cmd_train(&config(&data, &dir.path().join("trained"), 15)).unwrap();
    let untrained = cmd_train(&config(&data, &dir.path().join("untrained"), 0)).unwrap();
    let out = dir.path().join("eval");
    let a = eval(&trained.checkpoint, &data, &out, Split::Train, "trained");
    let b = eval(&untrained.checkpoint, &data, &out, Split::Train, "untrained");
    let (ma, mb) = (a.report.per_metric.mse.mean, b.report.per_metric.mse.mean);
    assert!(ma.is_finite() && ma < mb, "trained {ma} vs untrained {mb}");
    assert!(a.report.per_metric.tdi.mean.is_finite() && a.report.per_metric.dtw.mean.is_finite());
}

#[test]
fn trace_has_a_row_per_window_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_csv(dir.path());
    let a = cmd_train(&config(&data, dir.path(), 1)).unwrap();
    let e = eval(&a.checkpoint, &data, dir.path(), Split::Test, "r");
    // 600 rows leave a 120-row test split
    let windows = 120 - T - P + 1;
    let trace = fs::read_to_string(&e.traces[0]).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next().unwrap(), "window,step,truth_value,pred_value");
    assert_eq!(lines.count(), windows * P);
    assert_eq!(e.runs[0].per_sample.len(), windows);
}

#[test]
fn eval_rejects_mismatched_horizon_and_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_csv(dir.path());
    let a = cmd_train(&config(&data, dir.path(), 1)).unwrap();
    let mut req = EvalRequest {
        checkpoints: vec![a.checkpoint.clone()],
        data: DataSource::csv(&data),
        split: Split::Test,
        pred_len: Some(P + 1),
        out_dir: dir.path().into(),
        name: None,
        keep_samples: false,
    };
    assert!(matches!(cmd_eval(&req), Err(Error::Config(_))));
    req.pred_len = None;
    req.checkpoints = vec![dir.path().join("missing.checkpoint.json")];
    assert!(matches!(cmd_eval(&req), Err(Error::File { .. })));
}

fn report_pair(dir: &Path) -> (PathBuf, PathBuf) {
    let data = synth_csv(dir);
    let trained = cmd_train(&config(&data, dir, 3)).unwrap();
    let mut other = config(&data, dir, 3);
    other.loss.mode = LossMode::TaskOnly;
    let other = cmd_train(&other).unwrap();
    (
        eval(&trained.checkpoint, &data, dir, Split::Test, "a").report_path,
        eval(&other.checkpoint, &data, dir, Split::Test, "b").report_path,
    )
}

#[test]
fn compare_with_itself_ties_everything() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = report_pair(dir.path());
    let json = dir.path().join("cmp/table.json");
    let cmp = cmd_compare(&[a.clone(), a], Some(&json)).unwrap();
    assert_eq!(cmp.rows.len(), 2);
    for row in &cmp.rows {
        assert_eq!(row.best, BestMarks { tdi: true, dtw: true, mse: true });
    }
    let back: Comparison = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert_eq!(back, cmp);
    assert_eq!(cmp.render().matches('*').count(), 6);
}

#[test]
fn dominating_report_is_best_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = report_pair(dir.path());
    let good: contime::metrics::MetricReport = serde_json::from_slice(&fs::read(&a).unwrap()).unwrap();
    let mut bad = good.clone();
    bad.per_metric.tdi.mean += 1.0;
    bad.per_metric.dtw.mean *= 2.0;
    bad.per_metric.mse.mean *= 2.0;
    let cmp = Comparison::new(vec![("bad".into(), bad.clone()), ("good".into(), good.clone())]).unwrap();
    assert_eq!(cmp.rows[0].best, BestMarks::default());
    assert_eq!(cmp.rows[1].best, BestMarks { tdi: true, dtw: true, mse: true });

    let mut elsewhere = good.clone();
    elsewhere.dataset = "other".into();
    assert!(matches!(Comparison::new(vec![("g".into(), good.clone()), ("o".into(), elsewhere)]), Err(Error::Config(_))));
    let mut longer = good.clone();
    longer.pred_len += 1;
    assert!(matches!(Comparison::new(vec![("g".into(), good.clone()), ("l".into(), longer)]), Err(Error::Config(_))));
    assert!(matches!(Comparison::new(vec![("g".into(), good)]), Err(Error::Config(_))));
}

#[test]
fn compare_of_two_real_reports_marks_each_column_once_or_ties() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = report_pair(dir.path());
    let cmp = cmd_compare(&[a, b], None).unwrap();
    assert_eq!(cmp.rows[0].name, "a.test");
    let count = |f: fn(&BestMarks) -> bool| cmp.rows.iter().filter(|r| f(&r.best)).count();
    assert!(count(|b| b.tdi) >= 1 && count(|b| b.dtw) >= 1 && count(|b| b.mse) >= 1);
}

fn window_csv(dir: &Path, rows: usize) -> (PathBuf, Vec<f64>) {
    let data = fs::read_to_string(synth_csv(dir)).unwrap();
    let lines: Vec<&str> = data.lines().collect();
    let body = &lines[101..101 + rows];
    let path = dir.join(format!("window{rows}.csv"));
    fs::write(&path, format!("{}\n{}\n", lines[0], body.join("\n"))).unwrap();
    let last = body.last().unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    (path, last)
}

#[test]
fn forecast_anchors_to_the_last_observation() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_csv(dir.path());
    let a = cmd_train(&config(&data, dir.path(), 2)).unwrap();
    let (input, last) = window_csv(dir.path(), T);
    let before = fs::read(&input).unwrap();
    let out = dir.path().join("fc.csv");
    let y = cmd_forecast(&a.checkpoint, &input, Some(&out)).unwrap();
    assert_eq!(y.shape(), (P, 1));
    assert_eq!(y.row(0), last.as_slice());
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), P + 1);
    assert_eq!(fs::read(&input).unwrap(), before);

    let mut cfg = config(&data, &dir.path().join("noshift"), 2);
    cfg.train.shift = false;
    let b = cmd_train(&cfg).unwrap();
    let y = cmd_forecast(&b.checkpoint, &input, None).unwrap();
    assert_eq!(y.rows(), P);
    assert_ne!(y.row(0), last.as_slice());

    let (short, _) = window_csv(dir.path(), T - 1);
    assert!(matches!(cmd_forecast(&a.checkpoint, &short, None), Err(Error::Config(_))));
}

#[test]
fn dumped_windows_follow_the_count_formula() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_csv(dir.path());
    let files = cmd_dump_windows(&DataSource::csv(&data), T, P, dir.path()).unwrap();
    assert_eq!(files.len(), 3);
    for (file, n) in files.iter().zip([420, 60, 120]) {
        let rows = fs::read_to_string(file).unwrap().lines().count() - 1;
        assert_eq!(rows, (n - T - P + 1) * (T + P), "{}", file.display());
    }
}
