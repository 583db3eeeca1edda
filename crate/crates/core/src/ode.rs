//! Fixed-step RK4 integration of the continuous GRU hidden state.
//!
//! The delayed state `(h(t − τ), dh(t − τ)/dt)` is frozen over each lag
//! interval of length `τ` and refreshed from the committed trajectory at the
//! interval boundary. Inside an interval the field depends on `t` only, so
//! the RK4 steps there are exact up to the quadrature error of the stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gru::{self, GruCell, LagState};
use crate::ops::Ops;
use crate::spline::ContinuousPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Solver settings shared by both integration directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// RK4 step length in normalized time.
    pub step: f64,
    /// Delay `τ`: how often the lag state is refreshed. `None` means `τ = step`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lag_interval: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step: 0.5,
            lag_interval: None,
        }
    }
}

impl SolverConfig {
    pub fn new(step: f64) -> Self {
        Self {
            step,
            lag_interval: None,
        }
    }

    pub fn tau(&self) -> f64 {
        self.lag_interval.unwrap_or(self.step)
    }

    pub fn between(&self, t_start: f64, t_end: f64) -> IntegrationConfig {
        IntegrationConfig {
            step: self.step,
            lag_interval: self.tau(),
            direction: if t_end >= t_start {
                Direction::Forward
            } else {
                Direction::Backward
            },
            t_start,
            t_end,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub step: f64,
    pub lag_interval: f64,
    pub direction: Direction,
    pub t_start: f64,
    pub t_end: f64,
}

const GRID_EPS: f64 = 1e-9;

fn whole_multiple(what: &str, length: f64, unit: f64) -> Result<usize> {
    let ratio = length / unit;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > GRID_EPS * ratio.max(1.0) {
        return Err(Error::Config(format!(
            "{what}: {length} is not a positive whole multiple of {unit}"
        )));
    }
    Ok(n as usize)
}

impl IntegrationConfig {
    /// Returns `(total steps, steps per lag interval)`.
    pub fn validate(&self) -> Result<(usize, usize)> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("solver step must be positive, got {}", self.step)));
        }
        if !(self.lag_interval > 0.0 && self.lag_interval.is_finite()) {
            return Err(Error::Config(format!(
                "lag interval must be positive, got {}",
                self.lag_interval
            )));
        }
        let ok = match self.direction {
            Direction::Forward => self.t_start < self.t_end,
            Direction::Backward => self.t_start > self.t_end,
        };
        if !ok {
            return Err(Error::Config(format!(
                "{:?} integration from {} to {}",
                self.direction, self.t_start, self.t_end
            )));
        }
        let span = (self.t_end - self.t_start).abs();
        let steps = whole_multiple("integration span", span, self.step)?;
        let per_lag = whole_multiple("lag interval", self.lag_interval, self.step)?;
        whole_multiple("integration span", span, self.lag_interval)?;
        Ok((steps, per_lag))
    }

    fn signed_step(&self) -> f64 {
        match self.direction {
            Direction::Forward => self.step,
            Direction::Backward => -self.step,
        }
    }
}

/// Per-step record of one integration run.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrajectory<V = Vec<f64>> {
    pub times: Vec<f64>,
    pub states: Vec<V>,
    pub state_derivs: Vec<V>,
}

impl<V> HiddenTrajectory<V> {
    pub fn terminal(&self) -> (&V, &V) {
        (self.states.last().unwrap(), self.state_derivs.last().unwrap())
    }
}

struct Stages<V> {
    next: V,
    k1: V,
    k4: V,
}

fn check_finite<O: Ops>(ops: &O, v: &O::V, t: f64) -> Result<()> {
    if ops.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { t })
    }
}

fn rk4_stages<O, F>(ops: &mut O, field: &mut F, t: f64, h: &O::V, step: f64) -> Result<Stages<O::V>>
where
    O: Ops,
    F: FnMut(&mut O, f64, &O::V) -> Result<O::V>,
{
    let half = 0.5 * step;
    let k1 = field(ops, t, h)?;
    check_finite(ops, &k1, t)?;
    let h2 = {
        let d = ops.scale(&k1, half);
        ops.add(h, &d)?
    };
    let k2 = field(ops, t + half, &h2)?;
    check_finite(ops, &k2, t + half)?;
    let h3 = {
        let d = ops.scale(&k2, half);
        ops.add(h, &d)?
    };
    let k3 = field(ops, t + half, &h3)?;
    check_finite(ops, &k3, t + half)?;
    let h4 = {
        let d = ops.scale(&k3, step);
        ops.add(h, &d)?
    };
    let k4 = field(ops, t + step, &h4)?;
    check_finite(ops, &k4, t + step)?;

    let mid = ops.add(&k2, &k3)?;
    let ends = ops.add(&k1, &k4)?;
    let mid2 = ops.scale(&mid, 2.0);
    let total = ops.add(&ends, &mid2)?;
    let incr = ops.scale(&total, step / 6.0);
    let next = ops.add(h, &incr)?;
    check_finite(ops, &next, t + step)?;
    Ok(Stages { next, k1, k4 })
}

/// One classical RK4 step `h + step/6 · (k1 + 2k2 + 2k3 + k4)`.
///
/// `step` is signed: negative values integrate backward in time.
pub fn rk4_step<O, F>(ops: &mut O, mut field: F, t: f64, h: &O::V, step: f64) -> Result<O::V>
where
    O: Ops,
    F: FnMut(&mut O, f64, &O::V) -> Result<O::V>,
{
    Ok(rk4_stages(ops, &mut field, t, h, step)?.next)
}

/// RK4 stages of the GRU field under a frozen lag.
///
/// With the lag fixed the field depends on `t` only, so the two midpoint
/// stages coincide and are evaluated once. The combination is the same
/// `h + step/6 · (k1 + 2k2 + 2k3 + k4)` as [`rk4_step`].
#[allow(clippy::too_many_arguments)]
fn frozen_lag_stages<O: Ops>(
    ops: &mut O,
    cell: &GruCell<O::V>,
    path: &ContinuousPath,
    lag: &LagState<O::V>,
    terms: &gru::LagTerms<O::V>,
    t: f64,
    h: &O::V,
    step: f64,
) -> Result<Stages<O::V>> {
    let (lo, hi) = path.span();
    let eval = |ops: &mut O, s: f64| -> Result<O::V> {
        let s = s.clamp(lo, hi);
        let x = ops.constant(path.value(s)?);
        let dx = ops.constant(path.derivative(s)?);
        let k = gru::field_with(ops, cell, &x, &dx, lag, terms)?;
        check_finite(ops, &k, s)?;
        Ok(k)
    };
    let half = 0.5 * step;
    let k1 = eval(ops, t)?;
    let k_mid = eval(ops, t + half)?;
    let k4 = eval(ops, t + step)?;

    let mid = ops.add(&k_mid, &k_mid)?;
    let ends = ops.add(&k1, &k4)?;
    let mid2 = ops.scale(&mid, 2.0);
    let total = ops.add(&ends, &mid2)?;
    let incr = ops.scale(&total, step / 6.0);
    let next = ops.add(h, &incr)?;
    check_finite(ops, &next, t + step)?;
    Ok(Stages { next, k1, k4 })
}

/// Integrates one continuous GRU cell along `path` from `cfg.t_start` to `cfg.t_end`.
///
/// The lag state starts as `(h0, 0)` and is replaced by the committed
/// `(state, state_deriv)` at every lag-interval boundary.
pub fn integrate_hidden<O: Ops>(
    ops: &mut O,
    cell: &GruCell<O::V>,
    path: &ContinuousPath,
    h0: O::V,
    cfg: &IntegrationConfig,
) -> Result<HiddenTrajectory<O::V>> {
    let (steps, per_lag) = cfg.validate()?;
    let (lo, hi) = path.span();
    let (a, b) = (cfg.t_start.min(cfg.t_end), cfg.t_start.max(cfg.t_end));
    if a < lo - GRID_EPS || b > hi + GRID_EPS {
        let t = if a < lo { a } else { b };
        return Err(Error::OutOfSpan { t, lo, hi });
    }
    crate::error::ensure_len("initial hidden state", cell.hidden, ops.len(&h0))?;

    let dt = cfg.signed_step();
    let time_at = |n: usize| {
        if n == steps {
            cfg.t_end
        } else {
            (cfg.t_start + n as f64 * dt).clamp(lo, hi)
        }
    };

    let zero = ops.constant(vec![0.0; cell.hidden]);
    let mut lag = LagState {
        h_lag: h0.clone(),
        dh_lag: zero,
    };
    let mut terms = gru::lag_terms(ops, cell, &lag)?;

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut derivs: Vec<O::V> = Vec::with_capacity(steps + 1);
    times.push(cfg.t_start);
    states.push(h0);

    for n in 0..steps {
        let t = time_at(n);
        let t_next = time_at(n + 1);
        if n > 0 && n % per_lag == 0 {
            lag = LagState {
                h_lag: states[n].clone(),
                dh_lag: derivs[n].clone(),
            };
            terms = gru::lag_terms(ops, cell, &lag)?;
        }
        // the last stage must read the path exactly at the grid point
        let stages = frozen_lag_stages(ops, cell, path, &lag, &terms, t, &states[n], t_next - t)?;
        if n == 0 {
            derivs.push(stages.k1);
        }
        states.push(stages.next);
        derivs.push(stages.k4);
        times.push(t_next);
    }

    Ok(HiddenTrajectory {
        times,
        states,
        state_derivs: derivs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gru::GruCellParams;
    use crate::ops::Eager;
    use crate::spline::fit_regular;
    use crate::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_field(f: impl Fn(f64, f64) -> f64) -> impl FnMut(&mut Eager, f64, &Vec<f64>) -> Result<Vec<f64>> {
        move |_, t, h| Ok(vec![f(t, h[0])])
    }

    #[test]
    fn constant_field_is_exact() {
        let h = rk4_step(&mut Eager, scalar_field(|_, _| 1.0), 0.0, &vec![0.0], 0.5).unwrap();
        assert_eq!(h, vec![0.5]);
    }

    #[test]
    fn exponential_decay() {
        let mut h = vec![1.0];
        for n in 0..10 {
            h = rk4_step(&mut Eager, scalar_field(|_, h| -h), n as f64 * 0.1, &h, 0.1).unwrap();
        }
        assert!((h[0] - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn backward_growth_step() {
        // h' = h from h(1) = e, one step of −0.1 lands near e^0.9
        let e = 1.0f64.exp();
        let err = |step: f64| {
            let h = rk4_step(&mut Eager, scalar_field(|_, h| h), 1.0, &vec![e], -step).unwrap();
            (h[0] - (1.0 - step).exp()).abs()
        };
        assert!(err(0.1) < 1e-6);
        // local error is fifth order
        let ratio = err(0.1) / err(0.05);
        assert!(ratio > 25.0, "ratio {ratio}");
    }

    #[test]
    fn divergence_is_reported() {
        let out = rk4_step(&mut Eager, scalar_field(|_, _| f64::NAN), 2.0, &vec![0.0], 0.1);
        assert!(matches!(out, Err(Error::Divergence { t }) if t == 2.0));
    }

    fn smooth_path(n: usize) -> ContinuousPath {
        let data: Vec<f64> = (0..n)
            .flat_map(|i| {
                let t = i as f64;
                [(0.4 * t).sin(), 0.3 * (0.25 * t).cos()]
            })
            .collect();
        fit_regular(&Matrix::from_vec(n, 2, data).unwrap()).unwrap()
    }

    #[test]
    fn zero_cell_stays_put() {
        let path = smooth_path(6);
        let cell = GruCellParams::zeros(3, 2);
        let h0 = vec![0.4, -0.2, 0.9];
        let cfg = SolverConfig::new(0.5).between(0.0, 5.0);
        let traj = integrate_hidden(&mut Eager, &cell, &path, h0.clone(), &cfg).unwrap();
        assert_eq!(traj.times.len(), 11);
        for (s, d) in traj.states.iter().zip(&traj.state_derivs) {
            assert_eq!(s, &h0);
            assert_eq!(d, &vec![0.0; 3]);
        }
    }

    #[test]
    fn directions_and_grid() {
        let path = smooth_path(6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = GruCellParams::init(3, 2, &mut rng);
        let h0 = vec![0.1, 0.2, 0.3];
        let fwd = integrate_hidden(&mut Eager, &cell, &path, h0.clone(), &SolverConfig::new(0.25).between(0.0, 5.0)).unwrap();
        let bwd = integrate_hidden(&mut Eager, &cell, &path, h0.clone(), &SolverConfig::new(0.25).between(5.0, 0.0)).unwrap();
        assert_eq!(fwd.times[0], 0.0);
        assert_eq!(*fwd.times.last().unwrap(), 5.0);
        assert_eq!(bwd.times[0], 5.0);
        assert_eq!(*bwd.times.last().unwrap(), 0.0);
        assert_eq!(fwd.states[0], h0);
        assert_eq!(bwd.states[0], h0);
        assert!(bwd.times.windows(2).all(|w| (w[0] - w[1] - 0.25).abs() < 1e-12));
        assert_ne!(fwd.terminal().0, bwd.terminal().0);
    }

    #[test]
    fn rejects_bad_configs() {
        let path = smooth_path(6);
        let cell = GruCellParams::zeros(2, 2);
        let h0 = vec![0.0; 2];
        let bad = [
            IntegrationConfig { step: 0.3, lag_interval: 0.3, direction: Direction::Forward, t_start: 0.0, t_end: 5.0 },
            IntegrationConfig { step: 0.5, lag_interval: 0.5, direction: Direction::Backward, t_start: 0.0, t_end: 5.0 },
            IntegrationConfig { step: 0.5, lag_interval: 0.75, direction: Direction::Forward, t_start: 0.0, t_end: 5.0 },
            IntegrationConfig { step: -0.5, lag_interval: 0.5, direction: Direction::Forward, t_start: 0.0, t_end: 5.0 },
        ];
        for cfg in bad {
            assert!(matches!(
                integrate_hidden(&mut Eager, &cell, &path, h0.clone(), &cfg),
                Err(Error::Config(_))
            ));
        }
        let outside = SolverConfig::new(1.0).between(0.0, 7.0);
        assert!(matches!(
            integrate_hidden(&mut Eager, &cell, &path, h0, &outside),
            Err(Error::OutOfSpan { .. })
        ));
    }

    #[test]
    fn deterministic() {
        let path = smooth_path(8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cell = GruCellParams::init(4, 2, &mut rng);
        let cfg = SolverConfig::new(0.5).between(0.0, 7.0);
        let a = integrate_hidden(&mut Eager, &cell, &path, vec![0.1; 4], &cfg).unwrap();
        let b = integrate_hidden(&mut Eager, &cell, &path, vec![0.1; 4], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matches_plain_rk4_over_the_field() {
        let path = smooth_path(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cell = GruCellParams::init(4, 2, &mut rng);
        let cfg = SolverConfig::new(0.5).between(0.0, 7.0);
        let traj = integrate_hidden(&mut Eager, &cell, &path, vec![0.3; 4], &cfg).unwrap();

        let mut lag = LagState { h_lag: vec![0.3; 4], dh_lag: vec![0.0; 4] };
        let mut h = vec![0.3; 4];
        for n in 0..14 {
            let t = n as f64 * 0.5;
            if n > 0 {
                lag = LagState { h_lag: h.clone(), dh_lag: traj.state_derivs[n].clone() };
            }
            let f = |ops: &mut Eager, s: f64, _: &Vec<f64>| {
                gru::field(ops, &cell, &path.value(s)?, &path.derivative(s)?, &lag)
            };
            h = rk4_step(&mut Eager, f, t, &h, 0.5).unwrap();
            assert_eq!(h, traj.states[n + 1]);
        }
    }
}
