//! Shape and timing metrics: MSE, DTW with path recovery, the temporal
//! distortion index (TDI), and their soft-DTW relaxations.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::tensor::Matrix;

/// A monotone warping path between two equally long sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarpingPath {
    len: usize,
    /// Aligned index pairs from `(0, 0)` to `(P − 1, P − 1)`.
    steps: Vec<(usize, usize)>,
}

impl WarpingPath {
    pub fn steps(&self) -> &[(usize, usize)] {
        &self.steps
    }

    /// Binary `P × P` alignment matrix.
    pub fn matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.len, self.len);
        for &(i, j) in &self.steps {
            m[(i, j)] = 1.0;
        }
        m
    }

    pub fn is_diagonal(&self) -> bool {
        self.steps.iter().all(|&(i, j)| i == j)
    }
}

/// `Ω(h, j) = (h − j)² / P²`.
pub fn penalty_matrix(p: usize) -> Matrix {
    let mut m = Matrix::zeros(p, p);
    let p2 = (p * p) as f64;
    for h in 0..p {
        for j in 0..p {
            let d = h as f64 - j as f64;
            m[(h, j)] = d * d / p2;
        }
    }
    m
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::InsufficientData("DTW on an empty sequence".into()));
    }
    ensure_len("DTW sequence length", a.len(), b.len())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("soft-DTW temperature must be positive, got {gamma}")))
    }
}

/// Hard DTW with squared-difference costs.
///
/// Ties during backtracking prefer the diagonal, then the vertical move
/// `(i − 1, j)`, then the horizontal move `(i, j − 1)`.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<(f64, WarpingPath)> {
    check_pair(a, b)?;
    let n = a.len();
    let m = n + 1;
    let mut acc = vec![f64::INFINITY; m * m];
    acc[0] = 0.0;
    for i in 1..=n {
        for j in 1..=n {
            let d = a[i - 1] - b[j - 1];
            let best = acc[(i - 1) * m + j - 1]
                .min(acc[(i - 1) * m + j])
                .min(acc[i * m + j - 1]);
            acc[i * m + j] = d * d + best;
        }
    }

    let mut steps = vec![(n - 1, n - 1)];
    let (mut i, mut j) = (n, n);
    while (i, j) != (1, 1) {
        let diag = acc[(i - 1) * m + j - 1];
        let up = acc[(i - 1) * m + j];
        let left = acc[i * m + j - 1];
        (i, j) = if diag <= up && diag <= left {
            (i - 1, j - 1)
        } else if up <= left {
            (i - 1, j)
        } else {
            (i, j - 1)
        };
        steps.push((i - 1, j - 1));
    }
    steps.reverse();
    Ok((acc[n * m + n], WarpingPath { len: n, steps }))
}

/// TDI: the DTW-optimal path scored against the penalty matrix.
pub fn tdi(a: &[f64], b: &[f64]) -> Result<f64> {
    let (_, path) = dtw(a, b)?;
    let p2 = (a.len() * a.len()) as f64;
    Ok(path
        .steps
        .iter()
        .map(|&(h, j)| {
            let d = h as f64 - j as f64;
            d * d / p2
        })
        .sum())
}

/// Forward tables of soft-DTW on a padded `(P + 1)²` grid.
struct SoftTables {
    n: usize,
    /// accumulated soft cost `R`
    r: Vec<f64>,
    /// softmin weights of the (diagonal, up, left) predecessors per cell
    w: Vec<[f64; 3]>,
}

impl SoftTables {
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.n + 1) + j
    }

    fn preds(&self, i: usize, j: usize) -> [usize; 3] {
        [self.idx(i - 1, j - 1), self.idx(i - 1, j), self.idx(i, j - 1)]
    }
}

fn soft_forward(cost: &Matrix, gamma: f64) -> SoftTables {
    let n = cost.rows();
    let m = n + 1;
    let mut t = SoftTables {
        n,
        r: vec![f64::INFINITY; m * m],
        w: vec![[0.0; 3]; m * m],
    };
    t.r[0] = 0.0;
    for i in 1..=n {
        for j in 1..=n {
            let p = t.preds(i, j);
            let vals = [t.r[p[0]], t.r[p[1]], t.r[p[2]]];
            let lo = vals[0].min(vals[1]).min(vals[2]);
            let e = vals.map(|v| (-(v - lo) / gamma).exp());
            let z: f64 = e.iter().sum();
            let k = t.idx(i, j);
            t.r[k] = cost[(i - 1, j - 1)] + lo - gamma * z.ln();
            t.w[k] = e.map(|x| x / z);
        }
    }
    t
}

/// `E = ∂R(P, P)/∂R(i, j)`, which equals `∂ soft-DTW / ∂Δ(i, j)`.
fn soft_expectation(t: &SoftTables) -> Vec<f64> {
    let n = t.n;
    let mut e = vec![0.0; (n + 1) * (n + 1)];
    e[t.idx(n, n)] = 1.0;
    for i in (1..=n).rev() {
        for j in (1..=n).rev() {
            let k = t.idx(i, j);
            let ek = e[k];
            if ek == 0.0 {
                continue;
            }
            for (p, w) in t.preds(i, j).into_iter().zip(t.w[k]) {
                e[p] += ek * w;
            }
        }
    }
    e
}

fn squared_costs(a: &[f64], b: &[f64]) -> Matrix {
    let n = a.len();
    let mut c = Matrix::zeros(n, n);
    for h in 0..n {
        for j in 0..n {
            let d = a[h] - b[j];
            c[(h, j)] = d * d;
        }
    }
    c
}

fn unpad(n: usize, padded: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = padded[(i + 1) * (n + 1) + j + 1];
        }
    }
    m
}

/// Soft-DTW value and its expected alignment `∂ soft-DTW / ∂Δ`.
pub fn soft_dtw(a: &[f64], b: &[f64], gamma: f64) -> Result<(f64, Matrix)> {
    check_pair(a, b)?;
    check_gamma(gamma)?;
    let t = soft_forward(&squared_costs(a, b), gamma);
    let e = soft_expectation(&t);
    Ok((t.r[t.idx(t.n, t.n)], unpad(t.n, &e)))
}

/// Soft TDI `⟨A*_γ, Ω⟩`.
pub fn soft_tdi(pred: &[f64], target: &[f64], gamma: f64) -> Result<f64> {
    let (_, align) = soft_dtw(pred, target, gamma)?;
    let omega = penalty_matrix(pred.len());
    Ok(align
        .as_slice()
        .iter()
        .zip(omega.as_slice())
        .map(|(a, o)| a * o)
        .sum())
}

/// Soft TDI and its gradient with respect to `pred`.
///
/// `∂⟨E, Ω⟩/∂Δ` is the Hessian of soft-DTW applied to `Ω`, obtained by
/// pushing the tangent `Δ̇ = Ω` through both the forward recursion and the
/// expectation recursion.
pub fn soft_tdi_with_grad(pred: &[f64], target: &[f64], gamma: f64) -> Result<(f64, Vec<f64>)> {
    check_pair(pred, target)?;
    check_gamma(gamma)?;
    let n = pred.len();
    let m = n + 1;
    let omega = penalty_matrix(n);
    let t = soft_forward(&squared_costs(pred, target), gamma);
    let e = soft_expectation(&t);

    // tangents of the weights and of R along Ω
    let mut r_dot = vec![0.0; m * m];
    let mut w_dot = vec![[0.0; 3]; m * m];
    for i in 1..=n {
        for j in 1..=n {
            let k = t.idx(i, j);
            let p = t.preds(i, j);
            let w = t.w[k];
            let rd = [r_dot[p[0]], r_dot[p[1]], r_dot[p[2]]];
            let mean: f64 = (0..3).map(|q| w[q] * rd[q]).sum();
            r_dot[k] = omega[(i - 1, j - 1)] + mean;
            w_dot[k] = [0, 1, 2].map(|q| -w[q] * (rd[q] - mean) / gamma);
        }
    }
    let mut e_dot = vec![0.0; m * m];
    for i in (1..=n).rev() {
        for j in (1..=n).rev() {
            let k = t.idx(i, j);
            let (ek, edk) = (e[k], e_dot[k]);
            for (q, p) in t.preds(i, j).into_iter().enumerate() {
                e_dot[p] += edk * t.w[k][q] + ek * w_dot[k][q];
            }
        }
    }

    let value = (1..=n)
        .flat_map(|i| (1..=n).map(move |j| (i, j)))
        .map(|(i, j)| e[t.idx(i, j)] * omega[(i - 1, j - 1)])
        .sum();
    let grad = (0..n)
        .map(|h| {
            (0..n)
                .map(|j| e_dot[t.idx(h + 1, j + 1)] * 2.0 * (pred[h] - target[j]))
                .sum()
        })
        .collect();
    Ok((value, grad))
}

/// Per-window metrics: MSE over all entries, DTW and TDI averaged over features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub mse: f64,
    pub dtw: f64,
    pub tdi: f64,
}

pub fn sample_metrics(pred: &Matrix, truth: &Matrix) -> Result<SampleMetrics> {
    if pred.shape() != truth.shape() {
        return Err(crate::error::shape_err(
            "evaluate",
            format!("{:?}", truth.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let (p, f) = pred.shape();
    if p == 0 || f == 0 {
        return Err(Error::InsufficientData("empty forecast".into()));
    }
    let mse = pred
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / (p * f) as f64;
    let (mut d, mut t) = (0.0, 0.0);
    for j in 0..f {
        let (a, b) = (pred.column(j), truth.column(j));
        d += dtw(&a, &b)?.0;
        t += tdi(&a, &b)?;
    }
    Ok(SampleMetrics {
        mse,
        dtw: d / f as f64,
        tdi: t / f as f64,
    })
}

/// Metrics of one run over a set of forecast windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mse: f64,
    pub dtw: f64,
    pub tdi: f64,
    pub per_sample: Vec<SampleMetrics>,
}

pub fn evaluate(predictions: &[Matrix], truths: &[Matrix]) -> Result<RunMetrics> {
    ensure_len("evaluate: prediction count", truths.len(), predictions.len())?;
    if predictions.is_empty() {
        return Err(Error::InsufficientData("no forecasts to evaluate".into()));
    }
    let per_sample = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| sample_metrics(p, t))
        .collect::<Result<Vec<_>>>()?;
    let n = per_sample.len() as f64;
    Ok(RunMetrics {
        mse: per_sample.iter().map(|s| s.mse).sum::<f64>() / n,
        dtw: per_sample.iter().map(|s| s.dtw).sum::<f64>() / n,
        tdi: per_sample.iter().map(|s| s.tdi).sum::<f64>() / n,
        per_sample,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummaries {
    pub tdi: Summary,
    pub dtw: Summary,
    pub mse: Summary,
}

/// Seed-aggregated evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    #[serde(rename = "P")]
    pub pred_len: usize,
    pub seeds: Vec<u64>,
    pub per_metric: MetricSummaries,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<Vec<SampleMetrics>>>,
}

impl MetricReport {
    /// Aggregates one [`RunMetrics`] per seed.
    pub fn from_runs(
        dataset: impl Into<String>,
        pred_len: usize,
        seeds: Vec<u64>,
        runs: &[RunMetrics],
        keep_samples: bool,
    ) -> Result<Self> {
        ensure_len("report: runs per seed", seeds.len(), runs.len())?;
        if runs.is_empty() {
            return Err(Error::InsufficientData("report without runs".into()));
        }
        let pick = |f: fn(&RunMetrics) -> f64| Summary::of(&runs.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            dataset: dataset.into(),
            pred_len,
            seeds,
            per_metric: MetricSummaries {
                tdi: pick(|r| r.tdi),
                dtw: pick(|r| r.dtw),
                mse: pick(|r| r.mse),
            },
            per_sample: keep_samples.then(|| runs.iter().map(|r| r.per_sample.clone()).collect()),
        })
    }
}
