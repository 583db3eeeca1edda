//! Batch commands tying ingestion, training, evaluation and comparison
//! together. Each returns what it wrote so callers can report paths.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, CsvSchema, Dataset, SynthConfig, Window};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport, RunMetrics};
use crate::model::{self, Branches, Checkpoint, ContimeParams};
use crate::spline::fit_regular;
use crate::tensor::Matrix;
use crate::training::{self, EpochRecord, LossConfig, TrainConfig, TrainOutcome};

/// Where a run reads its series from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
    Synth(SynthConfig),
}

impl DataSource {
    pub fn csv(path: impl Into<PathBuf>) -> Self {
        Self::Csv {
            path: path.into(),
            schema: CsvSchema::default(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Csv { path, .. } => data::dataset_name(path),
            Self::Synth(_) => data::SYNTH_NAME.to_string(),
        }
    }

    /// Loads and splits the series, unnormalized. Every split must hold `min_len` rows.
    pub fn load(&self, min_len: usize) -> Result<Dataset> {
        let table = match self {
            Self::Csv { path, schema } => data::load_csv(path, schema)?,
            Self::Synth(cfg) => data::synth_table(cfg)?,
        };
        Dataset::from_table(self.name(), table, min_len)
    }
}

fn default_stride() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    /// Stride between training windows; validation and test always use 1.
    #[serde(default = "default_stride")]
    pub train_stride: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(data: DataSource) -> Self {
        Self {
            data,
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            train_stride: default_stride(),
            out_dir: default_out(),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        if self.train_stride == 0 {
            return Err(Error::Config("train stride must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the config with the output directory left out.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&c)?)))
    }

    /// File stem shared by every output of the run.
    pub fn stem(&self) -> String {
        format!(
            "{}_P{}_seed{}_{}",
            self.data.name(),
            self.train.pred_len,
            self.train.seed,
            self.loss.mode
        )
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::File {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })
}

/// One JSON object per line.
pub fn history_jsonl(history: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub config: PathBuf,
    pub outcome: TrainOutcome,
}

/// Trains on the train split, selects on validation, writes checkpoint,
/// history and the resolved config under `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let (t, p) = (cfg.train.input_len, cfg.train.pred_len);
    let ds = data::standardize(cfg.data.load(t + p)?)?;
    let train_w = data::window(&ds.splits.train, t, p, cfg.train_stride)?;
    let val_w = data::window(&ds.splits.val, t, p, 1)?;
    let dims = cfg.train.dims(ds.features());
    let init = ContimeParams::init(dims, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    tracing::info!(
        dataset = %ds.name,
        train_windows = train_w.len(),
        val_windows = val_w.len(),
        parameters = init.num_parameters(),
        "training"
    );
    let outcome = training::train(&train_w, &val_w, init, &cfg.train, &cfg.loss)?;

    ensure_dir(&cfg.out_dir)?;
    let stem = cfg.stem();
    let checkpoint = cfg.out_dir.join(format!("{stem}.checkpoint.json"));
    let history = cfg.out_dir.join(format!("{stem}.history.jsonl"));
    let config = cfg.out_dir.join(format!("{stem}.config.json"));

    Checkpoint::new(
        outcome.best.clone(),
        cfg.train.solver,
        cfg.train.shift,
        ds.name.clone(),
        ds.feature_names.clone(),
        cfg.train.seed,
        cfg.hash()?,
        ds.norm_stats.clone(),
    )
    .save(&checkpoint)?;
    // read back so a bad write fails the command
    Checkpoint::load(&checkpoint)?;
    write(&history, &history_jsonl(&outcome.history)?)?;
    write(&config, &serde_json::to_vec_pretty(cfg)?)?;
    Ok(TrainArtifacts {
        checkpoint,
        history,
        config,
        outcome,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }

    fn of(self, ds: &Dataset) -> &Matrix {
        match self {
            Self::Train => &ds.splits.train,
            Self::Val => &ds.splits.val,
            Self::Test => &ds.splits.test,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Shifted (when the checkpoint says so) forecasts for every window.
pub fn predict(ckpt: &Checkpoint, windows: &[Window]) -> Result<Vec<Matrix>> {
    windows
        .par_iter()
        .map(|w| {
            let path = fit_regular(&w.input)?;
            let out = model::forward_on(&ckpt.params, &path, &ckpt.solver, Branches::Both)?;
            if ckpt.shift {
                model::apply_shift(&out.y_hat, &w.last_obs)
            } else {
                Ok(out.y_hat)
            }
        })
        .collect()
}

fn check_compatible(ckpt: &Checkpoint, ds: &Dataset, path: &Path) -> Result<()> {
    if ckpt.feature_names != ds.feature_names {
        return Err(Error::Config(format!(
            "{} was trained on features {:?}, data has {:?}",
            path.display(),
            ckpt.feature_names,
            ds.feature_names
        )));
    }
    Ok(())
}

fn file_stem(path: &Path, suffix: &str) -> String {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(suffix).map(str::to_string).unwrap_or_else(|| data::dataset_name(path))
}

/// `window, step, truth_<f>…, pred_<f>…`, one row per forecast step.
pub fn write_trace(path: &Path, feature_names: &[String], windows: &[Window], preds: &[Matrix]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["window".to_string(), "step".to_string()];
    header.extend(feature_names.iter().map(|f| format!("truth_{f}")));
    header.extend(feature_names.iter().map(|f| format!("pred_{f}")));
    w.write_record(&header)?;
    for (k, (win, pred)) in windows.iter().zip(preds).enumerate() {
        for i in 0..pred.rows() {
            let mut rec = vec![k.to_string(), (i + 1).to_string()];
            rec.extend(win.target.row(i).iter().map(f64::to_string));
            rec.extend(pred.row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    /// One checkpoint per seed; all must share dataset, features, `T` and `P`.
    pub checkpoints: Vec<PathBuf>,
    pub data: DataSource,
    pub split: Split,
    /// When set, the checkpoints must forecast exactly this horizon.
    pub pred_len: Option<usize>,
    pub out_dir: PathBuf,
    /// Report name; defaults to the first checkpoint's stem.
    pub name: Option<String>,
    pub keep_samples: bool,
}

#[derive(Debug, Clone)]
pub struct EvalArtifacts {
    pub report_path: PathBuf,
    pub traces: Vec<PathBuf>,
    pub report: MetricReport,
    pub runs: Vec<RunMetrics>,
}

/// Scores checkpoints on one split in standardized units.
pub fn cmd_eval(req: &EvalRequest) -> Result<EvalArtifacts> {
    let Some(first) = req.checkpoints.first() else {
        return Err(Error::Config("no checkpoint to evaluate".into()));
    };
    let ckpts = req
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let dims = ckpts[0].dims();
    for (c, path) in ckpts.iter().zip(&req.checkpoints) {
        if c.dims() != dims || c.dataset != ckpts[0].dataset {
            return Err(Error::Config(format!(
                "{} does not match {} (dataset, T, P or sizes differ)",
                path.display(),
                first.display()
            )));
        }
    }
    if let Some(p) = req.pred_len {
        if p != dims.pred_len {
            return Err(Error::Config(format!("checkpoint forecasts P = {}, asked for {p}", dims.pred_len)));
        }
    }

    let raw = req.data.load(dims.input_len + dims.pred_len)?;
    ensure_dir(&req.out_dir)?;
    let mut runs = Vec::with_capacity(ckpts.len());
    let mut traces = Vec::with_capacity(ckpts.len());
    for (ckpt, path) in ckpts.iter().zip(&req.checkpoints) {
        let ds = match &ckpt.norm_stats {
            Some(stats) => raw.clone().with_stats(stats.clone())?,
            None => raw.clone(),
        };
        check_compatible(ckpt, &ds, path)?;
        let windows = data::window(req.split.of(&ds), dims.input_len, dims.pred_len, 1)?;
        let preds = predict(ckpt, &windows)?;
        let truths: Vec<Matrix> = windows.iter().map(|w| w.target.clone()).collect();
        runs.push(metrics::evaluate(&preds, &truths)?);
        let trace = req.out_dir.join(format!(
            "{}.{}.trace.csv",
            file_stem(path, ".checkpoint.json"),
            req.split.as_str()
        ));
        write_trace(&trace, &ds.feature_names, &windows, &preds)?;
        traces.push(trace);
    }

    let seeds = ckpts.iter().map(|c| c.seed).collect();
    let report = MetricReport::from_runs(ckpts[0].dataset.clone(), dims.pred_len, seeds, &runs, req.keep_samples)?;
    let name = req.name.clone().unwrap_or_else(|| file_stem(first, ".checkpoint.json"));
    let report_path = req.out_dir.join(format!("{name}.{}.report.json", req.split.as_str()));
    write(&report_path, &serde_json::to_vec_pretty(&report)?)?;
    Ok(EvalArtifacts {
        report_path,
        traces,
        report,
        runs,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BestMarks {
    pub tdi: bool,
    pub dtw: bool,
    pub mse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub report: MetricReport,
    pub best: BestMarks,
}

/// Reports side by side, lowest mean per metric marked best (ties share it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset: String,
    #[serde(rename = "P")]
    pub pred_len: usize,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn new(named: Vec<(String, MetricReport)>) -> Result<Self> {
        if named.len() < 2 {
            return Err(Error::Config(format!("compare needs at least 2 reports, got {}", named.len())));
        }
        let (dataset, pred_len) = (named[0].1.dataset.clone(), named[0].1.pred_len);
        for (name, r) in &named {
            if r.dataset != dataset || r.pred_len != pred_len {
                return Err(Error::Config(format!(
                    "report `{name}` is for {} at P = {}, expected {dataset} at P = {pred_len}",
                    r.dataset, r.pred_len
                )));
            }
        }
        let min = |f: fn(&MetricReport) -> f64| named.iter().map(|(_, r)| f(r)).fold(f64::INFINITY, f64::min);
        let (tdi, dtw, mse) = (
            min(|r| r.per_metric.tdi.mean),
            min(|r| r.per_metric.dtw.mean),
            min(|r| r.per_metric.mse.mean),
        );
        let rows = named
            .into_iter()
            .map(|(name, report)| {
                let best = BestMarks {
                    tdi: report.per_metric.tdi.mean == tdi,
                    dtw: report.per_metric.dtw.mean == dtw,
                    mse: report.per_metric.mse.mean == mse,
                };
                ComparisonRow { name, report, best }
            })
            .collect();
        Ok(Self {
            dataset,
            pred_len,
            rows,
        })
    }

    /// Plain-text table; `*` marks the best value of each column.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(3);
        let mut out = String::new();
        let _ = writeln!(out, "dataset {}  P = {}", self.dataset, self.pred_len);
        let _ = writeln!(out, "{:<width$}  {:>20}  {:>20}  {:>20}", "run", "TDI", "DTW", "MSE");
        for row in &self.rows {
            let m = &row.report.per_metric;
            let cell = |s: &metrics::Summary, best: bool| {
                format!("{:.4} ± {:.4}{}", s.mean, s.std, if best { "*" } else { " " })
            };
            let _ = writeln!(
                out,
                "{:<width$}  {:>20}  {:>20}  {:>20}",
                row.name,
                cell(&m.tdi, row.best.tdi),
                cell(&m.dtw, row.best.dtw),
                cell(&m.mse, row.best.mse)
            );
        }
        out
    }
}

/// Loads reports, builds the table and optionally writes its JSON mirror.
pub fn cmd_compare(reports: &[PathBuf], json_out: Option<&Path>) -> Result<Comparison> {
    let named = reports
        .iter()
        .map(|p| {
            let report: MetricReport = serde_json::from_slice(&read(p)?).map_err(|e| Error::File {
                path: p.clone(),
                message: format!("not a metric report: {e}"),
            })?;
            Ok((file_stem(p, ".report.json"), report))
        })
        .collect::<Result<Vec<_>>>()?;
    let cmp = Comparison::new(named)?;
    if let Some(path) = json_out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            ensure_dir(dir)?;
        }
        write(path, &serde_json::to_vec_pretty(&cmp)?)?;
    }
    Ok(cmp)
}

/// `P` denormalized forecast rows for the `T`-row window in `input`.
pub fn cmd_forecast(checkpoint: &Path, input: &Path, out: Option<&Path>) -> Result<Matrix> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let dims = ckpt.dims();
    let schema = CsvSchema {
        date_column: None,
        features: Some(ckpt.feature_names.clone()),
    };
    let table = data::load_csv(input, &schema)?;
    if table.values.rows() != dims.input_len {
        return Err(Error::Config(format!(
            "forecast input has {} rows, the checkpoint expects T = {}",
            table.values.rows(),
            dims.input_len
        )));
    }
    let raw_last = table.values.row(dims.input_len - 1).to_vec();
    let x = match &ckpt.norm_stats {
        Some(s) => s.transform(&table.values)?,
        None => table.values.clone(),
    };
    let path = fit_regular(&x)?;
    let y = model::forward_on(&ckpt.params, &path, &ckpt.solver, Branches::Both)?.y_hat;
    let y = if ckpt.shift {
        model::apply_shift(&y, x.row(dims.input_len - 1))?
    } else {
        y
    };
    let mut y = match &ckpt.norm_stats {
        Some(s) => s.inverse(&y)?,
        None => y,
    };
    if ckpt.shift {
        // undoing the z-score can perturb the anchored row by an ulp
        y.row_mut(0).copy_from_slice(&raw_last);
    }

    if let Some(path) = out {
        let file = fs::File::create(path).map_err(|e| Error::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        write_forecast(file, &ckpt.feature_names, &y)?;
    }
    Ok(y)
}

/// Forecast rows as CSV: a `step` column (1-based) then one column per feature.
pub fn write_forecast(out: impl std::io::Write, feature_names: &[String], y: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string()];
    header.extend(feature_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..y.rows() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(y.row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a synthetic series as a CSV with a `date` column.
pub fn cmd_synth(cfg: &SynthConfig, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    data::write_table(path, &data::synth_table(cfg)?)
}

/// Writes the windows of every split, one CSV per split.
pub fn cmd_dump_windows(source: &DataSource, t: usize, p: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ds = data::standardize(source.load(t + p)?)?;
    ensure_dir(out_dir)?;
    let mut written = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let windows = data::window(split.of(&ds), t, p, 1)?;
        let path = out_dir.join(format!("{}_T{t}_P{p}.{}.windows.csv", ds.name, split.as_str()));
        data::dump_windows(&path, &ds.feature_names, &windows)?;
        written.push(path);
    }
    Ok(written)
}
