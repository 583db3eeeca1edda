//! Loss family, Adam, and the train / validate / keep-best loop.

use std::cell::RefCell;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Window;
use crate::error::{ensure_len, shape_err, Error, Result};
use crate::model::{self, Branches, Contime, ContimeParams, GradientSet, ModelDims};
use crate::ode::SolverConfig;
use crate::ops::{Eager, Ops};
use crate::spline::{fit_regular, ContinuousPath};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// `α · L_task` only.
    TaskOnly,
    /// `α · L_task + β · L_Δt`.
    TaskDelta,
    /// `α · L_task + β · L_TDI`.
    TaskTdi,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TaskOnly => "task-only",
            Self::TaskDelta => "task-delta",
            Self::TaskTdi => "task-tdi",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task-only" | "task" => Ok(Self::TaskOnly),
            "task-delta" | "task+delta" => Ok(Self::TaskDelta),
            "task-tdi" | "task+tdi" => Ok(Self::TaskTdi),
            other => Err(Error::Config(format!("unknown loss mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mode: LossMode,
    /// Soft-DTW temperature for [`LossMode::TaskTdi`].
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 0.1,
            mode: LossMode::TaskDelta,
            gamma: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "loss coefficients must be non-negative, got α = {}, β = {}",
                self.alpha, self.beta
            )));
        }
        if (self.alpha + self.beta).is_nan() || self.alpha + self.beta <= 0.0 {
            return Err(Error::Config("α + β must be positive".into()));
        }
        if self.gamma.is_nan() || self.gamma <= 0.0 {
            return Err(Error::Config(format!("γ must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

fn check_same(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err("loss", format!("{:?}", b.shape()), format!("{:?}", a.shape())))
    }
}

fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_same(a, b)?;
    let n = a.as_slice().len();
    if n == 0 {
        return Err(Error::InsufficientData("loss over an empty forecast".into()));
    }
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64)
}

/// Mean squared error between forecast and truth.
pub fn loss_task(y_hat: &Matrix, y: &Matrix) -> Result<f64> {
    mse(y_hat, y)
}

/// Mean squared error between the forecast derivative and target differences.
pub fn loss_delta_t(y_hat_dt: &Matrix, y_dt: &Matrix) -> Result<f64> {
    mse(y_hat_dt, y_dt)
}

/// `α · task + β · aux`; task-only mode drops the auxiliary term.
pub fn loss_total(cfg: &LossConfig, task: f64, aux: f64) -> f64 {
    match cfg.mode {
        LossMode::TaskOnly => cfg.alpha * task,
        _ => cfg.alpha * task + cfg.beta * aux,
    }
}

/// Soft TDI of one feature channel.
pub fn loss_tdi_soft(y_hat: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    crate::metrics::soft_tdi(y_hat, y, gamma)
}

/// Loss terms of one window, as backend handles.
#[derive(Debug, Clone)]
pub struct LossParts<V> {
    pub total: V,
    pub task: V,
    pub delta_t: V,
    pub tdi: Option<V>,
}

/// A window prepared for repeated forward passes.
#[derive(Debug, Clone)]
pub struct PreparedWindow {
    pub path: ContinuousPath,
    pub target: Matrix,
    pub target_dt: Matrix,
    pub last_obs: Vec<f64>,
}

impl PreparedWindow {
    pub fn new(w: &Window) -> Result<Self> {
        Ok(Self {
            path: fit_regular(&w.input)?,
            target_dt: model::target_differences(&w.target, &w.last_obs)?,
            target: w.target.clone(),
            last_obs: w.last_obs.clone(),
        })
    }
}

/// Forecast and all loss terms for one window on any backend.
pub fn window_loss<O: Ops>(
    ops: &mut O,
    params: &Contime<O::V>,
    win: &PreparedWindow,
    solver: &SolverConfig,
    loss: &LossConfig,
    shift: bool,
    branches: Branches,
) -> Result<LossParts<O::V>> {
    let dims = params.dims;
    let out = model::forward_path(ops, params, &win.path, solver, branches)?;
    let pred = if shift {
        model::apply_shift_flat(ops, &out.y_hat, &win.last_obs, dims.pred_len)?
    } else {
        out.y_hat
    };
    let target = ops.constant(win.target.as_slice().to_vec());
    let task = ops.mse(&pred, &target)?;
    let target_dt = ops.constant(win.target_dt.as_slice().to_vec());
    let delta_t = ops.mse(&out.y_hat_dt, &target_dt)?;

    let tdi = if loss.mode == LossMode::TaskTdi {
        let f = dims.features;
        let mut per_feature = Vec::with_capacity(f);
        for j in 0..f {
            let idx: Vec<usize> = (0..dims.pred_len).map(|i| i * f + j).collect();
            let col = ops.gather(&pred, &idx)?;
            per_feature.push(ops.soft_tdi(&col, &win.target.column(j), loss.gamma)?);
        }
        let all = ops.concat(&per_feature);
        Some(ops.mean(&all)?)
    } else {
        None
    };

    let scaled_task = ops.scale(&task, loss.alpha);
    let total = match (loss.mode, &tdi) {
        (LossMode::TaskOnly, _) => scaled_task,
        (LossMode::TaskDelta, _) => {
            let aux = ops.scale(&delta_t, loss.beta);
            ops.add(&scaled_task, &aux)?
        }
        (LossMode::TaskTdi, Some(t)) => {
            let aux = ops.scale(t, loss.beta);
            ops.add(&scaled_task, &aux)?
        }
        (LossMode::TaskTdi, None) => unreachable!(),
    };
    Ok(LossParts { total, task, delta_t, tdi })
}

/// Scalar values of [`LossParts`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub task: f64,
    pub delta_t: f64,
    pub tdi: Option<f64>,
}

impl LossValues {
    fn read<O: Ops>(ops: &O, parts: &LossParts<O::V>) -> Self {
        Self {
            total: ops.value(&parts.total)[0],
            task: ops.value(&parts.task)[0],
            delta_t: ops.value(&parts.delta_t)[0],
            tdi: parts.tdi.as_ref().map(|t| ops.value(t)[0]),
        }
    }

    fn accumulate(&mut self, o: &LossValues) {
        self.total += o.total;
        self.task += o.task;
        self.delta_t += o.delta_t;
        self.tdi = match (self.tdi, o.tdi) {
            (Some(a), Some(b)) => Some(a + b),
            (None, b) => b,
            (a, None) => a,
        };
    }

    fn scaled(mut self, k: f64) -> Self {
        self.total *= k;
        self.task *= k;
        self.delta_t *= k;
        self.tdi = self.tdi.map(|t| t * k);
        self
    }
}

/// Loss values and exact gradients for one window.
pub fn window_gradient(
    params: &ContimeParams,
    win: &PreparedWindow,
    solver: &SolverConfig,
    loss: &LossConfig,
    shift: bool,
    branches: Branches,
) -> Result<(LossValues, GradientSet)> {
    thread_local! {
        static TAPE: RefCell<Tape> = RefCell::new(Tape::new());
    }
    TAPE.with(|cell| {
        let mut tape = cell.borrow_mut();
        tape.clear();
        let leaves = params.register(&mut tape);
        let parts = window_loss(&mut *tape, &leaves, win, solver, loss, shift, branches)?;
        let adj = tape.backward(parts.total)?;
        Ok((LossValues::read(&*tape, &parts), leaves.map(|&id| adj.get(id))))
    })
}

/// Loss values for one window without recording.
pub fn window_eval(
    params: &ContimeParams,
    win: &PreparedWindow,
    solver: &SolverConfig,
    loss: &LossConfig,
    shift: bool,
) -> Result<LossValues> {
    let mut ops = Eager;
    let parts = window_loss(&mut ops, params, win, solver, loss, shift, Branches::Both)?;
    Ok(LossValues::read(&ops, &parts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a flat tensor. `t` is the 1-based step.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), mi), vi) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: GradientSet,
    pub v: GradientSet,
    pub step: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(dims: ModelDims) -> Self {
        Self {
            m: ContimeParams::zeros(dims),
            v: ContimeParams::zeros(dims),
            step: 0,
            cfg: AdamConfig::default(),
        }
    }
}

fn take_all(set: &mut GradientSet) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    set.visit_mut(|_, v| out.push(std::mem::take(v)));
    out
}

fn restore_all(set: &mut GradientSet, tensors: Vec<Vec<f64>>) {
    let mut it = tensors.into_iter();
    set.visit_mut(|_, v| *v = it.next().expect("same layout"));
}

/// Adam step over every parameter tensor.
pub fn adam_step(params: &mut ContimeParams, grads: &GradientSet, state: &mut AdamState, lr: f64) -> Result<()> {
    let mut bad = None;
    grads.visit(|name, g| {
        if bad.is_none() && g.iter().any(|x| !x.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(Error::NonFiniteGradient { name });
    }
    state.step += 1;
    let t = state.step;
    let cfg = state.cfg;
    let mut gs = Vec::new();
    grads.visit(|_, g| gs.push(g));
    let mut ms = take_all(&mut state.m);
    let mut vs = take_all(&mut state.v);
    let mut k = 0;
    params.visit_mut(|_, p| {
        adam_update(p, gs[k], &mut ms[k], &mut vs[k], t, lr, &cfg);
        k += 1;
    });
    restore_all(&mut state.m, ms);
    restore_all(&mut state.v, vs);
    Ok(())
}

pub fn global_norm(grads: &GradientSet) -> f64 {
    let mut s = 0.0;
    grads.visit(|_, g| s += g.iter().map(|x| x * x).sum::<f64>());
    s.sqrt()
}

/// Rescales `grads` so its global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut GradientSet, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        grads.visit_mut(|_, g| g.iter_mut().for_each(|x| *x *= k));
    }
    norm
}

fn add_grads(acc: &mut GradientSet, g: &GradientSet) {
    let mut gs = Vec::new();
    g.visit(|_, v| gs.push(v));
    let mut k = 0;
    acc.visit_mut(|_, a| {
        for (x, y) in a.iter_mut().zip(gs[k]) {
            *x += y;
        }
        k += 1;
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub input_len: usize,
    pub pred_len: usize,
    pub solver: SolverConfig,
    pub shift: bool,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Fill `wall_ms` in the history. Off keeps history files reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            hidden_dim: 16,
            input_len: 60,
            pred_len: 24,
            solver: SolverConfig::default(),
            shift: true,
            clip_norm: Some(10.0),
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.hidden_dim == 0 || self.pred_len == 0 || self.input_len < 2 {
            return Err(Error::Config("batch size, hidden dim, T and P must be positive (T ≥ 2)".into()));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        // grid alignment of the window span
        self.solver.between(0.0, (self.input_len - 1) as f64).validate()?;
        Ok(())
    }

    pub fn dims(&self, features: usize) -> ModelDims {
        ModelDims {
            hidden: self.hidden_dim,
            features,
            input_len: self.input_len,
            pred_len: self.pred_len,
        }
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub task: f64,
    pub delta_t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tdi: Option<f64>,
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: ContimeParams,
    /// 1-based epoch of `best`; 0 when no epoch ran.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Divergence { .. } | Error::NumericAdjoint { .. } | Error::NonFiniteGradient { .. } => {
            Error::TrainingDiverged {
                epoch,
                reason: e.to_string(),
            }
        }
        other => other,
    }
}

pub fn prepare(windows: &[Window]) -> Result<Vec<PreparedWindow>> {
    windows.iter().map(PreparedWindow::new).collect()
}

/// Mean loss over windows with the eager backend.
pub fn evaluate_loss(
    params: &ContimeParams,
    windows: &[PreparedWindow],
    solver: &SolverConfig,
    loss: &LossConfig,
    shift: bool,
) -> Result<LossValues> {
    let vals = windows
        .par_iter()
        .map(|w| window_eval(params, w, solver, loss, shift))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = LossValues::default();
    vals.iter().for_each(|v| acc.accumulate(v));
    Ok(acc.scaled(1.0 / windows.len().max(1) as f64))
}

/// Trains with shuffled mini-batches and returns the best-validation snapshot.
pub fn train(
    train_windows: &[Window],
    val_windows: &[Window],
    init: ContimeParams,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    init.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::Config("training and validation data must be non-empty".into()));
    }
    let dims = init.dims;
    for w in train_windows.iter().chain(val_windows) {
        ensure_len("window input length", dims.input_len, w.input.rows())?;
        ensure_len("window horizon", dims.pred_len, w.target.rows())?;
        ensure_len("window features", dims.features, w.input.cols())?;
    }
    let train_set = prepare(train_windows)?;
    let val_set = prepare(val_windows)?;

    // stream 0 is left to parameter initialization
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut params = init.clone();
    let mut adam = AdamState::new(dims);
    let mut best = init;
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_sum = LossValues::default();
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| window_gradient(&params, &train_set[i], &cfg.solver, loss, cfg.shift, Branches::Both))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| diverged(epoch, e))?;
            let mut grads = ContimeParams::zeros(dims);
            for (vals, g) in &results {
                epoch_sum.accumulate(vals);
                add_grads(&mut grads, g);
            }
            let k = 1.0 / batch.len() as f64;
            grads.visit_mut(|_, g| g.iter_mut().for_each(|x| *x *= k));
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut params, &grads, &mut adam, cfg.learning_rate).map_err(|e| diverged(epoch, e))?;
        }
        let train_vals = epoch_sum.scaled(1.0 / train_set.len() as f64);
        let val = evaluate_loss(&params, &val_set, &cfg.solver, loss, cfg.shift).map_err(|e| diverged(epoch, e))?;
        if !train_vals.total.is_finite() || !val.total.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                reason: "non-finite loss".into(),
            });
        }
        if val.total < best_val {
            best_val = val.total;
            best = params.clone();
            best_epoch = epoch;
        }
        let record = EpochRecord {
            epoch,
            train_loss: train_vals.total,
            val_loss: val.total,
            task: train_vals.task,
            delta_t: train_vals.delta_t,
            tdi: train_vals.tdi,
            wall_ms: cfg.record_wall_time.then(|| started.elapsed().as_millis() as u64),
        };
        tracing::info!(
            epoch,
            train = record.train_loss,
            val = record.val_loss,
            ms = started.elapsed().as_millis() as u64,
            "epoch done"
        );
        history.push(record);
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}
