//! The bi-directional continuous GRU forecaster.
//!
//! `h1` is integrated forward from `Φ1(X_s)` over `[s, T]`, `h2` backward
//! from `Φ2(X_T)` over `[T, s]`. The reverse layer reads the backward
//! terminal value as the forward-time position `T − s`, the two branches are
//! summed into `h(T)`, and one affine head produces the `P × F` forecast.
//! The head applied to `dh1(T)/dt` without its bias gives the forecast's time
//! derivative.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{ensure_len, shape_err, Error, Result};
use crate::gru::{GruCell, GruCellParams};
use crate::ode::{integrate_hidden, SolverConfig};
use crate::ops::{Eager, Ops};
use crate::spline::{fit_hermite, ContinuousPath, TimeSeriesSample};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub hidden: usize,
    pub features: usize,
    /// Input window length `T`.
    pub input_len: usize,
    /// Forecast horizon `P`.
    pub pred_len: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.features == 0 || self.pred_len == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.input_len < 2 {
            return Err(Error::Config(format!("input length must be at least 2, got {}", self.input_len)));
        }
        Ok(())
    }

    pub fn output_len(&self) -> usize {
        self.pred_len * self.features
    }
}

/// All trainable tensors. Matrices are flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contime<V> {
    pub dims: ModelDims,
    /// `hidden × features`
    pub phi1_w: V,
    pub phi1_b: V,
    pub phi2_w: V,
    pub phi2_b: V,
    pub cell1: GruCell<V>,
    pub cell2: GruCell<V>,
    /// `(P·F) × hidden`
    pub head_w: V,
    pub head_b: V,
}

pub type ContimeParams = Contime<Vec<f64>>;
/// One gradient tensor per parameter tensor.
pub type GradientSet = Contime<Vec<f64>>;

impl<V> Contime<V> {
    pub fn map<W>(&self, mut f: impl FnMut(&V) -> W) -> Contime<W> {
        Contime {
            dims: self.dims,
            phi1_w: f(&self.phi1_w),
            phi1_b: f(&self.phi1_b),
            phi2_w: f(&self.phi2_w),
            phi2_b: f(&self.phi2_b),
            cell1: self.cell1.map(&mut f),
            cell2: self.cell2.map(&mut f),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }

    /// Visits every tensor under a dotted name, in a fixed order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, &'a V)) {
        f("phi1.w", &self.phi1_w);
        f("phi1.b", &self.phi1_b);
        f("phi2.w", &self.phi2_w);
        f("phi2.b", &self.phi2_b);
        self.cell1.visit(|n, v| f(&format!("cell1.{n}"), v));
        self.cell2.visit(|n, v| f(&format!("cell2.{n}"), v));
        f("head.w", &self.head_w);
        f("head.b", &self.head_b);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut V)) {
        f("phi1.w", &mut self.phi1_w);
        f("phi1.b", &mut self.phi1_b);
        f("phi2.w", &mut self.phi2_w);
        f("phi2.b", &mut self.phi2_b);
        self.cell1.visit_mut(|n, v| f(&format!("cell1.{n}"), v));
        self.cell2.visit_mut(|n, v| f(&format!("cell2.{n}"), v));
        f("head.w", &mut self.head_w);
        f("head.b", &mut self.head_b);
    }
}

impl ContimeParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let (h, f, o) = (dims.hidden, dims.features, dims.output_len());
        Contime {
            dims,
            phi1_w: vec![0.0; h * f],
            phi1_b: vec![0.0; h],
            phi2_w: vec![0.0; h * f],
            phi2_b: vec![0.0; h],
            cell1: GruCellParams::zeros(h, f),
            cell2: GruCellParams::zeros(h, f),
            head_w: vec![0.0; o * h],
            head_b: vec![0.0; o],
        }
    }

    /// Affine maps use `U(±1/√fan_in)` weights and zero biases.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut p = Self::zeros(dims);
        let kf = 1.0 / (dims.features as f64).sqrt();
        let kh = 1.0 / (dims.hidden as f64).sqrt();
        p.phi1_w.iter_mut().for_each(|x| *x = rng.gen_range(-kf..=kf));
        p.phi2_w.iter_mut().for_each(|x| *x = rng.gen_range(-kf..=kf));
        p.cell1 = GruCellParams::init(dims.hidden, dims.features, rng);
        p.cell2 = GruCellParams::init(dims.hidden, dims.features, rng);
        p.head_w.iter_mut().for_each(|x| *x = rng.gen_range(-kh..=kh));
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let (h, f, o) = (self.dims.hidden, self.dims.features, self.dims.output_len());
        ensure_len("phi1.w", h * f, self.phi1_w.len())?;
        ensure_len("phi1.b", h, self.phi1_b.len())?;
        ensure_len("phi2.w", h * f, self.phi2_w.len())?;
        ensure_len("phi2.b", h, self.phi2_b.len())?;
        for cell in [&self.cell1, &self.cell2] {
            if (cell.hidden, cell.features) != (h, f) {
                return Err(shape_err("GRU cell dims", format!("({h}, {f})"), format!("({}, {})", cell.hidden, cell.features)));
            }
            cell.validate()?;
        }
        ensure_len("head.w", o * h, self.head_w.len())?;
        ensure_len("head.b", o, self.head_b.len())?;
        let mut finite = true;
        self.visit(|_, v| finite &= v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::Config("parameters contain non-finite entries".into()));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(|_, v| n += v.len());
        n
    }

    /// Registers every tensor as a trainable leaf.
    pub fn register(&self, tape: &mut crate::autodiff::Tape) -> Contime<crate::autodiff::NodeId> {
        self.map(|v| tape.param(v.clone()))
    }
}

/// Which branches feed `h(T)`. `ForwardOnly` is a diagnostic mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Branches {
    #[default]
    Both,
    ForwardOnly,
}

/// Raw model outputs with flattened `P·F` forecasts (row-major `P × F`).
#[derive(Debug, Clone)]
pub struct ForecastOutputs<V> {
    pub y_hat: V,
    pub y_hat_dt: V,
    pub h_terminal: V,
    pub dh_terminal: V,
}

/// Forward pass on any [`Ops`] backend.
pub fn forward_path<O: Ops>(
    ops: &mut O,
    params: &Contime<O::V>,
    path: &ContinuousPath,
    solver: &SolverConfig,
    branches: Branches,
) -> Result<ForecastOutputs<O::V>> {
    let dims = params.dims;
    let (h, f) = (dims.hidden, dims.features);
    ensure_len("path features", f, path.features())?;
    ensure_len("path length", dims.input_len, path.knot_times().len())?;
    let (s, t_end) = path.span();

    let x_s = ops.constant(path.value(s)?);
    let x_t = ops.constant(path.value(t_end)?);
    let h1_s = {
        let w = ops.matvec(&params.phi1_w, &x_s, h, f)?;
        ops.add(&w, &params.phi1_b)?
    };

    let fwd = integrate_hidden(ops, &params.cell1, path, h1_s, &solver.between(s, t_end))?;
    let (h1_t, dh1_t) = fwd.terminal();
    let (h1_t, dh1_t) = (h1_t.clone(), dh1_t.clone());

    let h_terminal = match branches {
        Branches::Both => {
            let h2_t = {
                let w = ops.matvec(&params.phi2_w, &x_t, h, f)?;
                ops.add(&w, &params.phi2_b)?
            };
            let bwd = integrate_hidden(ops, &params.cell2, path, h2_t, &solver.between(t_end, s))?;
            // reverse layer: the backward run ends at s, which is the
            // forward-time position T − s of the re-indexed trajectory
            let h2_reversed = bwd.states.last().unwrap().clone();
            ops.add(&h1_t, &h2_reversed)?
        }
        Branches::ForwardOnly => h1_t,
    };

    let out = dims.output_len();
    let y_hat = {
        let w = ops.matvec(&params.head_w, &h_terminal, out, h)?;
        ops.add(&w, &params.head_b)?
    };
    let y_hat_dt = ops.matvec(&params.head_w, &dh1_t, out, h)?;
    Ok(ForecastOutputs {
        y_hat,
        y_hat_dt,
        h_terminal,
        dh_terminal: dh1_t,
    })
}

/// Eager forward pass output.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastOutput {
    /// `P × F`
    pub y_hat: Matrix,
    /// `P × F`, the head applied to `dh1(T)/dt`
    pub y_hat_dt: Matrix,
    pub h_terminal: Vec<f64>,
    pub dh_terminal: Vec<f64>,
}

pub fn forward(params: &ContimeParams, sample: &TimeSeriesSample, solver: &SolverConfig) -> Result<ForecastOutput> {
    if sample.len() != params.dims.input_len {
        return Err(Error::Config(format!(
            "sample has {} observations, model expects T = {}",
            sample.len(),
            params.dims.input_len
        )));
    }
    forward_on(params, &fit_hermite(sample), solver, Branches::Both)
}

pub fn forward_on(
    params: &ContimeParams,
    path: &ContinuousPath,
    solver: &SolverConfig,
    branches: Branches,
) -> Result<ForecastOutput> {
    let out = forward_path(&mut Eager, params, path, solver, branches)?;
    let (p, f) = (params.dims.pred_len, params.dims.features);
    Ok(ForecastOutput {
        y_hat: Matrix::from_vec(p, f, out.y_hat)?,
        y_hat_dt: Matrix::from_vec(p, f, out.y_hat_dt)?,
        h_terminal: out.h_terminal,
        dh_terminal: out.dh_terminal,
    })
}

/// Offsets every row so the first forecast row equals `last_obs`.
pub fn apply_shift(y_hat: &Matrix, last_obs: &[f64]) -> Result<Matrix> {
    ensure_len("shift: last observation", y_hat.cols(), last_obs.len())?;
    if y_hat.rows() == 0 {
        return Err(Error::InsufficientData("shift of an empty forecast".into()));
    }
    let offset: Vec<f64> = last_obs.iter().zip(y_hat.row(0)).map(|(o, y)| o - y).collect();
    let mut out = y_hat.clone();
    for i in 0..out.rows() {
        for (v, d) in out.row_mut(i).iter_mut().zip(&offset) {
            *v += d;
        }
    }
    // exact anchoring regardless of rounding in y0 + (o − y0)
    out.row_mut(0).copy_from_slice(last_obs);
    Ok(out)
}

/// Taped counterpart of [`apply_shift`] on a flattened forecast.
pub fn apply_shift_flat<O: Ops>(ops: &mut O, y_hat: &O::V, last_obs: &[f64], pred_len: usize) -> Result<O::V> {
    let f = last_obs.len();
    ensure_len("shift: forecast length", pred_len * f, ops.len(y_hat))?;
    let first = ops.slice(y_hat, 0, f)?;
    let anchor = ops.constant(last_obs.to_vec());
    let offset = ops.sub(&anchor, &first)?;
    let tiled: Vec<usize> = (0..pred_len * f).map(|k| k % f).collect();
    let tiled = ops.gather(&offset, &tiled)?;
    ops.add(y_hat, &tiled)
}

/// First differences of the target, anchored on the last input row.
pub fn target_differences(y: &Matrix, last_obs: &[f64]) -> Result<Matrix> {
    ensure_len("differences: last observation", y.cols(), last_obs.len())?;
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let prev = if i == 0 { last_obs } else { y.row(i - 1) };
        for (j, (a, b)) in y.row(i).iter().zip(prev).enumerate() {
            out[(i, j)] = a - b;
        }
    }
    Ok(out)
}

const CHECKPOINT_FORMAT: &str = "contime-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dataset: String,
    pub feature_names: Vec<String>,
    pub seed: u64,
    pub solver: SolverConfig,
    pub shift: bool,
    pub config_hash: String,
    pub norm_stats: Option<NormStats>,
    pub params: ContimeParams,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: ContimeParams,
        solver: SolverConfig,
        shift: bool,
        dataset: impl Into<String>,
        feature_names: Vec<String>,
        seed: u64,
        config_hash: impl Into<String>,
        norm_stats: Option<NormStats>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dataset: dataset.into(),
            feature_names,
            seed,
            solver,
            shift,
            config_hash: config_hash.into(),
            norm_stats,
            params,
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.params.dims
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::File {
            path: path.to_path_buf(),
            message: format!("not a checkpoint: {e}"),
        })?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::File {
                path: path.to_path_buf(),
                message: format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version),
            });
        }
        ckpt.params.validate()?;
        Ok(ckpt)
    }
}
