//! CSV ingestion, chronological splitting, z-scoring and windowing, plus the
//! synthetic regime-flip series used for desk-scale experiments.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::tensor::Matrix;

/// Which CSV columns to read. The date column is kept for reporting only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Defaults to the first column.
    pub date_column: Option<String>,
    /// Defaults to every column except the date column.
    pub features: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub dates: Vec<String>,
    pub feature_names: Vec<String>,
    /// `rows × features`, in file order.
    pub values: Matrix,
}

fn ingestion(path: &Path, row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ingestion(path, 0, name, "missing column"))
    };

    let date_idx = match &schema.date_column {
        Some(name) => find(name)?,
        None => 0,
    };
    let feature_idx: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != date_idx).collect(),
    };
    if feature_idx.is_empty() {
        return Err(ingestion(path, 0, "", "no feature columns"));
    }

    let mut dates = Vec::new();
    let mut values = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 1;
        let record = record?;
        dates.push(record.get(date_idx).unwrap_or_default().to_string());
        for &j in &feature_idx {
            let cell = record.get(j).unwrap_or("");
            let v: f64 = cell
                .parse()
                .map_err(|_| ingestion(path, row, &headers[j], format!("non-numeric cell {cell:?}")))?;
            if !v.is_finite() {
                return Err(ingestion(path, row, &headers[j], format!("non-finite cell {cell:?}")));
            }
            values.push(v);
        }
    }
    if dates.is_empty() {
        return Err(Error::InsufficientData(format!("{}: no data rows", path.display())));
    }
    Ok(RawTable {
        feature_names: feature_idx.iter().map(|&j| headers[j].clone()).collect(),
        values: Matrix::from_vec(dates.len(), feature_idx.len(), values)?,
        dates,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Chronological 70/10/20 split: `⌊0.7N⌋`, `⌊0.1N⌋`, remainder.
///
/// `min_len` is the shortest acceptable split (one `T + P` window); pass 0
/// to only require `N ≥ 10`.
pub fn split_70_10_20(n: usize, min_len: usize) -> Result<SplitRanges> {
    if n < 10 {
        return Err(Error::Config(format!("need at least 10 rows to split, got {n}")));
    }
    let train = n * 7 / 10;
    let val = n / 10;
    let ranges = SplitRanges {
        train: 0..train,
        val: train..train + val,
        test: train + val..n,
    };
    for (name, r) in [("train", &ranges.train), ("val", &ranges.val), ("test", &ranges.test)] {
        if r.len() < min_len {
            return Err(Error::Config(format!(
                "{name} split has {} rows, one window needs {min_len}",
                r.len()
            )));
        }
    }
    Ok(ranges)
}

/// Per-feature mean and (population) standard deviation of the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(m: &Matrix, feature_names: &[String]) -> Result<Self> {
        let (n, f) = m.shape();
        if n == 0 {
            return Err(Error::InsufficientData("no rows to fit normalization on".into()));
        }
        let mut mean = vec![0.0; f];
        for row in m.row_iter() {
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n as f64);
        let mut var = vec![0.0; f];
        for row in m.row_iter() {
            for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *a += (v - mu).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        // relative guard: a constant column leaves only rounding noise
        if let Some(j) = (0..f).find(|&j| std[j].is_nan() || std[j] <= 1e-12 * mean[j].abs().max(1.0)) {
            let name = feature_names.get(j).cloned().unwrap_or_else(|| j.to_string());
            return Err(Error::Config(format!("feature `{name}` is constant on the train split")));
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, m: &Matrix) -> Result<Matrix> {
        ensure_len("normalization features", self.mean.len(), m.cols())?;
        let mut out = m.clone();
        for i in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
        Ok(out)
    }

    pub fn inverse(&self, m: &Matrix) -> Result<Matrix> {
        ensure_len("normalization features", self.mean.len(), m.cols())?;
        let mut out = m.clone();
        for i in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * sd + mu;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Matrix,
    pub val: Matrix,
    pub test: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_names: Vec<String>,
    pub dates: Vec<String>,
    pub ranges: SplitRanges,
    pub splits: Splits,
    pub norm_stats: Option<NormStats>,
}

impl Dataset {
    pub fn from_table(name: impl Into<String>, table: RawTable, min_len: usize) -> Result<Self> {
        let ranges = split_70_10_20(table.values.rows(), min_len)?;
        let v = &table.values;
        let splits = Splits {
            train: v.row_block(ranges.train.start, ranges.train.len()),
            val: v.row_block(ranges.val.start, ranges.val.len()),
            test: v.row_block(ranges.test.start, ranges.test.len()),
        };
        Ok(Self {
            name: name.into(),
            feature_names: table.feature_names,
            dates: table.dates,
            ranges,
            splits,
            norm_stats: None,
        })
    }

    pub fn features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn with_stats(mut self, stats: NormStats) -> Result<Self> {
        if self.norm_stats.is_some() {
            return Err(Error::Config(format!("dataset `{}` is already standardized", self.name)));
        }
        self.splits = Splits {
            train: stats.transform(&self.splits.train)?,
            val: stats.transform(&self.splits.val)?,
            test: stats.transform(&self.splits.test)?,
        };
        self.norm_stats = Some(stats);
        Ok(self)
    }
}

/// Z-scores every split with statistics fitted on the train split only.
pub fn standardize(dataset: Dataset) -> Result<Dataset> {
    if dataset.norm_stats.is_some() {
        return Err(Error::Config(format!("dataset `{}` is already standardized", dataset.name)));
    }
    let stats = NormStats::fit(&dataset.splits.train, &dataset.feature_names)?;
    dataset.with_stats(stats)
}

/// One supervised example cut from a split.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Row of the split where the input starts.
    pub start: usize,
    /// `T × F`
    pub input: Matrix,
    /// `P × F`, the rows right after the input
    pub target: Matrix,
    /// Final input row.
    pub last_obs: Vec<f64>,
}

pub fn window(split: &Matrix, input_len: usize, pred_len: usize, stride: usize) -> Result<Vec<Window>> {
    if input_len < 2 || pred_len == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "invalid windowing T = {input_len}, P = {pred_len}, stride = {stride}"
        )));
    }
    let total = input_len + pred_len;
    if split.rows() < total {
        return Err(Error::Config(format!(
            "split has {} rows, one window needs T + P = {total}",
            split.rows()
        )));
    }
    Ok((0..=split.rows() - total)
        .step_by(stride)
        .map(|start| {
            let input = split.row_block(start, input_len);
            Window {
                start,
                last_obs: input.row(input_len - 1).to_vec(),
                target: split.row_block(start + input_len, pred_len),
                input,
            }
        })
        .collect())
}

/// Writes windows as CSV rows `window, role, step, <features…>`.
pub fn dump_windows(path: &Path, feature_names: &[String], windows: &[Window]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["window".to_string(), "role".into(), "step".into()];
    header.extend(feature_names.iter().cloned());
    w.write_record(&header)?;
    for (k, win) in windows.iter().enumerate() {
        for (role, m) in [("input", &win.input), ("target", &win.target)] {
            for (s, row) in m.row_iter().enumerate() {
                let mut rec = vec![k.to_string(), role.to_string(), s.to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Parameters of the synthetic regime-flip sinusoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub length: usize,
    pub period: usize,
    pub seed: u64,
    /// Chance of a regime change at each zero crossing.
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
}

fn default_flip_prob() -> f64 {
    0.2
}

impl SynthConfig {
    pub fn new(length: usize, period: usize, seed: u64) -> Self {
        Self {
            length,
            period,
            seed,
            flip_prob: default_flip_prob(),
        }
    }
}

pub const SYNTH_NAME: &str = "synth-lagged-regime";

/// Sinusoid whose sign and amplitude change at random zero crossings.
///
/// Regime changes only happen where the wave crosses zero, so the series
/// stays continuous while its direction becomes unpredictable from the
/// recent past. A lag-one copy of such a series scores a small MSE but
/// aligns off the diagonal.
pub fn synth_series(cfg: &SynthConfig) -> Result<Vec<f64>> {
    if cfg.period < 2 || cfg.length < 10 * cfg.period {
        return Err(Error::Config(format!(
            "synthetic series needs period ≥ 2 and length ≥ 10·period, got length {} period {}",
            cfg.length, cfg.period
        )));
    }
    if !(0.0..=1.0).contains(&cfg.flip_prob) {
        return Err(Error::Config(format!("flip probability {} outside [0, 1]", cfg.flip_prob)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let omega = std::f64::consts::TAU / cfg.period as f64;
    let half = cfg.period as f64 / 2.0;
    let (mut sign, mut amp) = (1.0, 1.0);
    let mut crossing = 0usize;
    Ok((0..cfg.length)
        .map(|i| {
            let t = i as f64;
            let k = (t / half).floor() as usize;
            while crossing < k {
                crossing += 1;
                if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
                    sign = -sign;
                    amp = rng.gen_range(0.5..1.5);
                }
            }
            sign * amp * (omega * t).sin()
        })
        .collect())
}

pub fn synth_table(cfg: &SynthConfig) -> Result<RawTable> {
    let series = synth_series(cfg)?;
    Ok(RawTable {
        dates: (0..series.len()).map(|i| i.to_string()).collect(),
        feature_names: vec!["value".into()],
        values: Matrix::from_vec(series.len(), 1, series)?,
    })
}

/// Unnormalized synthetic dataset, split 70/10/20.
pub fn synth_lagged_regime(length: usize, period: usize, seed: u64) -> Result<Dataset> {
    Dataset::from_table(SYNTH_NAME, synth_table(&SynthConfig::new(length, period, seed))?, 0)
}

pub fn write_table(path: &Path, table: &RawTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string()];
    header.extend(table.feature_names.iter().cloned());
    w.write_record(&header)?;
    for (date, row) in table.dates.iter().zip(table.values.row_iter()) {
        let mut rec = vec![date.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Dataset name derived from a file path (its stem).
pub fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| PathBuf::from(path).display().to_string())
}
