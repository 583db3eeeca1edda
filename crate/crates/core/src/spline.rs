//! Continuous control paths built from discrete samples with cubic Hermite
//! segments.
//!
//! Knot tangents are backward differences (the first tangent is zero), so
//! each segment only depends on observations up to its right knot: appending
//! an observation never changes earlier segments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// An observation window: strictly increasing time stamps and an `L × F` value matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSample {
    times: Vec<f64>,
    values: Matrix,
}

impl TimeSeriesSample {
    pub fn new(times: Vec<f64>, values: Matrix) -> Result<Self> {
        if times.len() != values.rows() {
            return Err(Error::InvalidSample(format!(
                "{} time stamps for {} rows",
                times.len(),
                values.rows()
            )));
        }
        if times.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "a path needs at least 2 observations, got {}",
                times.len()
            )));
        }
        if values.cols() == 0 {
            return Err(Error::InvalidSample("sample has no features".into()));
        }
        if let Some(i) = times.windows(2).position(|w| w[0].is_nan() || w[1].is_nan() || w[1] <= w[0]) {
            return Err(Error::InvalidSample(format!(
                "time stamps not strictly increasing at index {}",
                i + 1
            )));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidSample("non-finite time stamp".into()));
        }
        if let Some(k) = values.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSample(format!(
                "missing or non-finite value at row {}",
                k / values.cols()
            )));
        }
        Ok(Self { times, values })
    }

    /// Sample on the normalized grid `0, 1, …, L − 1`.
    pub fn regular(values: Matrix) -> Result<Self> {
        let times = (0..values.rows()).map(|i| i as f64).collect();
        Self::new(times, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn features(&self) -> usize {
        self.values.cols()
    }
}

/// Piecewise-cubic interpolant with an exact derivative.
///
/// Segment `i` on feature `f` is `c0 + c1·u + c2·u² + c3·u³` with
/// `u = t − knot_times[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousPath {
    knot_times: Vec<f64>,
    features: usize,
    /// `(L − 1) × F` blocks of four coefficients, segment-major.
    coeffs: Vec<[f64; 4]>,
    last_values: Vec<f64>,
}

impl ContinuousPath {
    pub fn knot_times(&self) -> &[f64] {
        &self.knot_times
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn span(&self) -> (f64, f64) {
        (self.knot_times[0], *self.knot_times.last().unwrap())
    }

    pub fn segments(&self) -> usize {
        self.knot_times.len() - 1
    }

    /// Coefficients `[c0, c1, c2, c3]` of segment `seg` for feature `feature`.
    pub fn segment_coeffs(&self, seg: usize, feature: usize) -> [f64; 4] {
        self.coeffs[seg * self.features + feature]
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let (lo, hi) = self.span();
        if !(t >= lo && t <= hi) {
            return Err(Error::OutOfSpan { t, lo, hi });
        }
        let seg = self
            .knot_times
            .partition_point(|&k| k <= t)
            .saturating_sub(1)
            .min(self.segments() - 1);
        Ok((seg, t - self.knot_times[seg]))
    }

    pub fn value(&self, t: f64) -> Result<Vec<f64>> {
        let (seg, u) = self.locate(t)?;
        if t == self.span().1 {
            return Ok(self.last_values.clone());
        }
        Ok(self.coeffs[seg * self.features..(seg + 1) * self.features]
            .iter()
            .map(|c| c[0] + u * (c[1] + u * (c[2] + u * c[3])))
            .collect())
    }

    pub fn derivative(&self, t: f64) -> Result<Vec<f64>> {
        let (seg, u) = self.locate(t)?;
        Ok(self.coeffs[seg * self.features..(seg + 1) * self.features]
            .iter()
            .map(|c| c[1] + u * (2.0 * c[2] + u * 3.0 * c[3]))
            .collect())
    }
}

/// Fits the Hermite path through every observation of `sample`.
pub fn fit_hermite(sample: &TimeSeriesSample) -> ContinuousPath {
    let times = sample.times();
    let values = sample.values();
    let f = values.cols();
    let n = times.len();

    // backward-difference tangents, zero at the first knot
    let mut tangents = Matrix::zeros(n, f);
    for i in 1..n {
        let dt = times[i] - times[i - 1];
        for j in 0..f {
            tangents[(i, j)] = (values[(i, j)] - values[(i - 1, j)]) / dt;
        }
    }

    let mut coeffs = Vec::with_capacity((n - 1) * f);
    for i in 0..n - 1 {
        let dt = times[i + 1] - times[i];
        for j in 0..f {
            let (y0, y1) = (values[(i, j)], values[(i + 1, j)]);
            let (m0, m1) = (tangents[(i, j)], tangents[(i + 1, j)]);
            let slope = (y1 - y0) / dt;
            coeffs.push([
                y0,
                m0,
                (3.0 * slope - 2.0 * m0 - m1) / dt,
                (m0 + m1 - 2.0 * slope) / (dt * dt),
            ]);
        }
    }

    ContinuousPath {
        knot_times: times.to_vec(),
        features: f,
        coeffs,
        last_values: values.row(n - 1).to_vec(),
    }
}

/// Convenience: `fit_hermite` on a sample built from the normalized grid.
pub fn fit_regular(values: &Matrix) -> Result<ContinuousPath> {
    Ok(fit_hermite(&TimeSeriesSample::regular(values.clone())?))
}

pub fn path_value(path: &ContinuousPath, t: f64) -> Result<Vec<f64>> {
    path.value(t)
}

pub fn path_derivative(path: &ContinuousPath, t: f64) -> Result<Vec<f64>> {
    path.derivative(t)
}
