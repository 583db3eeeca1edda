//! Continuous GRU gates and their closed-form time derivatives.
//!
//! With pre-activations
//!
//! ```text
//! A = W_z x + U_z h_lag + b_z        z = σ(A)
//! C = W_r x + U_r h_lag + b_r        r = σ(C)
//! B = W_g x + U_g (r ⊙ h_lag) + b_g  g = tanh(B)
//! ```
//!
//! and `ζ = h_lag − g`, the hidden state `h = z ⊙ h_lag + (1 − z) ⊙ g` has
//! derivative `dh/dt = dz/dt ⊙ ζ + z ⊙ (dh_lag/dt − dg/dt) + dg/dt`. All
//! functions are generic over [`Ops`] so the same code drives inference and
//! the recording tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Result};
use crate::ops::{Eager, Ops};

/// Weights of one continuous GRU cell. Matrices are flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCell<V> {
    pub hidden: usize,
    pub features: usize,
    /// `hidden × features`
    pub w_z: V,
    pub w_r: V,
    pub w_g: V,
    /// `hidden × hidden`
    pub u_z: V,
    pub u_r: V,
    pub u_g: V,
    pub b_z: V,
    pub b_r: V,
    pub b_g: V,
}

pub type GruCellParams = GruCell<Vec<f64>>;

impl<V> GruCell<V> {
    pub fn map<W>(&self, mut f: impl FnMut(&V) -> W) -> GruCell<W> {
        GruCell {
            hidden: self.hidden,
            features: self.features,
            w_z: f(&self.w_z),
            w_r: f(&self.w_r),
            w_g: f(&self.w_g),
            u_z: f(&self.u_z),
            u_r: f(&self.u_r),
            u_g: f(&self.u_g),
            b_z: f(&self.b_z),
            b_r: f(&self.b_r),
            b_g: f(&self.b_g),
        }
    }

    /// Visits every tensor with its field name, in a fixed order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&'static str, &'a V)) {
        f("w_z", &self.w_z);
        f("w_r", &self.w_r);
        f("w_g", &self.w_g);
        f("u_z", &self.u_z);
        f("u_r", &self.u_r);
        f("u_g", &self.u_g);
        f("b_z", &self.b_z);
        f("b_r", &self.b_r);
        f("b_g", &self.b_g);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&'static str, &mut V)) {
        f("w_z", &mut self.w_z);
        f("w_r", &mut self.w_r);
        f("w_g", &mut self.w_g);
        f("u_z", &mut self.u_z);
        f("u_r", &mut self.u_r);
        f("u_g", &mut self.u_g);
        f("b_z", &mut self.b_z);
        f("b_r", &mut self.b_r);
        f("b_g", &mut self.b_g);
    }
}

impl GruCellParams {
    pub fn zeros(hidden: usize, features: usize) -> Self {
        let w = vec![0.0; hidden * features];
        let u = vec![0.0; hidden * hidden];
        let b = vec![0.0; hidden];
        GruCell {
            hidden,
            features,
            w_z: w.clone(),
            w_r: w.clone(),
            w_g: w,
            u_z: u.clone(),
            u_r: u.clone(),
            u_g: u,
            b_z: b.clone(),
            b_r: b.clone(),
            b_g: b,
        }
    }

    /// `W ~ U(±1/√F)`, `U ~ U(±1/√H)`, zero biases.
    pub fn init<R: Rng>(hidden: usize, features: usize, rng: &mut R) -> Self {
        let mut cell = Self::zeros(hidden, features);
        let (kw, ku) = (1.0 / (features as f64).sqrt(), 1.0 / (hidden as f64).sqrt());
        for w in [&mut cell.w_z, &mut cell.w_r, &mut cell.w_g] {
            w.iter_mut().for_each(|x| *x = rng.gen_range(-kw..=kw));
        }
        for u in [&mut cell.u_z, &mut cell.u_r, &mut cell.u_g] {
            u.iter_mut().for_each(|x| *x = rng.gen_range(-ku..=ku));
        }
        cell
    }

    pub fn validate(&self) -> Result<()> {
        let (h, f) = (self.hidden, self.features);
        let mut out = Ok(());
        self.visit(|name, v| {
            let expected = match name.as_bytes()[0] {
                b'w' => h * f,
                b'u' => h * h,
                _ => h,
            };
            if out.is_ok() {
                out = ensure_len("GRU cell tensor", expected, v.len());
            }
        });
        out
    }
}

/// `h(t − τ)` and its time derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct LagState<V = Vec<f64>> {
    pub h_lag: V,
    pub dh_lag: V,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateState<V = Vec<f64>> {
    pub a: V,
    pub b: V,
    pub c: V,
    pub z: V,
    pub r: V,
    pub g: V,
    /// `h_lag − g`
    pub zeta: V,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDerivatives<V = Vec<f64>> {
    pub dz_dt: V,
    pub dg_dt: V,
    pub dr_dt: V,
}

/// Recurrent-weight products with the lag state. They stay fixed while the
/// lag is frozen, so an integrator can compute them once per lag interval.
#[derive(Debug, Clone, PartialEq)]
pub struct LagTerms<V = Vec<f64>> {
    pub uz_h: V,
    pub ur_h: V,
    pub uz_dh: V,
    pub ur_dh: V,
}

fn check_inputs<O: Ops>(ops: &O, cell: &GruCell<O::V>, x: &O::V, lag: &LagState<O::V>) -> Result<()> {
    ensure_len("gate input x", cell.features, ops.len(x))?;
    ensure_len("lag state h", cell.hidden, ops.len(&lag.h_lag))?;
    ensure_len("lag state dh", cell.hidden, ops.len(&lag.dh_lag))
}

pub fn lag_terms<O: Ops>(ops: &mut O, cell: &GruCell<O::V>, lag: &LagState<O::V>) -> Result<LagTerms<O::V>> {
    ensure_len("lag state h", cell.hidden, ops.len(&lag.h_lag))?;
    ensure_len("lag state dh", cell.hidden, ops.len(&lag.dh_lag))?;
    let hd = cell.hidden;
    Ok(LagTerms {
        uz_h: ops.matvec(&cell.u_z, &lag.h_lag, hd, hd)?,
        ur_h: ops.matvec(&cell.u_r, &lag.h_lag, hd, hd)?,
        uz_dh: ops.matvec(&cell.u_z, &lag.dh_lag, hd, hd)?,
        ur_dh: ops.matvec(&cell.u_r, &lag.dh_lag, hd, hd)?,
    })
}

/// `(W·x + u) + b`
fn affine<O: Ops>(ops: &mut O, w: &O::V, x: &O::V, u: &O::V, b: &O::V, cell: (usize, usize)) -> Result<O::V> {
    let (hd, f) = cell;
    let wx = ops.matvec(w, x, hd, f)?;
    let s = ops.add(&wx, u)?;
    ops.add(&s, b)
}

/// Gate pre-activations and activations at one evaluation point.
pub fn gate_states<O: Ops>(
    ops: &mut O,
    cell: &GruCell<O::V>,
    x: &O::V,
    lag: &LagState<O::V>,
) -> Result<GateState<O::V>> {
    check_inputs(ops, cell, x, lag)?;
    let terms = lag_terms(ops, cell, lag)?;
    gate_states_with(ops, cell, x, lag, &terms)
}

pub fn gate_states_with<O: Ops>(
    ops: &mut O,
    cell: &GruCell<O::V>,
    x: &O::V,
    lag: &LagState<O::V>,
    terms: &LagTerms<O::V>,
) -> Result<GateState<O::V>> {
    check_inputs(ops, cell, x, lag)?;
    let dims = (cell.hidden, cell.features);
    let a = affine(ops, &cell.w_z, x, &terms.uz_h, &cell.b_z, dims)?;
    let c = affine(ops, &cell.w_r, x, &terms.ur_h, &cell.b_r, dims)?;
    let r = ops.sigmoid(&c);
    let rh = ops.mul(&r, &lag.h_lag)?;
    let ug = ops.matvec(&cell.u_g, &rh, cell.hidden, cell.hidden)?;
    let b = affine(ops, &cell.w_g, x, &ug, &cell.b_g, dims)?;
    let z = ops.sigmoid(&a);
    let g = ops.tanh(&b);
    let zeta = ops.sub(&lag.h_lag, &g)?;
    Ok(GateState { a, b, c, z, r, g, zeta })
}

/// `σ(u)(1 − σ(u))` from `s = σ(u)`.
fn sigmoid_slope<O: Ops>(ops: &mut O, s: &O::V) -> Result<O::V> {
    let one_minus = ops.affine(s, -1.0, 1.0);
    ops.mul(s, &one_minus)
}

/// Time derivatives of the update gate, candidate and reset gate.
///
/// `dr/dt` is formed first because `dB/dt` consumes it.
pub fn gate_derivatives<O: Ops>(
    ops: &mut O,
    cell: &GruCell<O::V>,
    dx_dt: &O::V,
    lag: &LagState<O::V>,
    gates: &GateState<O::V>,
) -> Result<GateDerivatives<O::V>> {
    let terms = lag_terms(ops, cell, lag)?;
    gate_derivatives_with(ops, cell, dx_dt, lag, gates, &terms)
}

pub fn gate_derivatives_with<O: Ops>(
    ops: &mut O,
    cell: &GruCell<O::V>,
    dx_dt: &O::V,
    lag: &LagState<O::V>,
    gates: &GateState<O::V>,
    terms: &LagTerms<O::V>,
) -> Result<GateDerivatives<O::V>> {
    ensure_len("gate input dx/dt", cell.features, ops.len(dx_dt))?;
    let (hd, f) = (cell.hidden, cell.features);

    let dc = {
        let wx = ops.matvec(&cell.w_r, dx_dt, hd, f)?;
        ops.add(&wx, &terms.ur_dh)?
    };
    let r_slope = sigmoid_slope(ops, &gates.r)?;
    let dr_dt = ops.mul(&r_slope, &dc)?;

    let da = {
        let wx = ops.matvec(&cell.w_z, dx_dt, hd, f)?;
        ops.add(&wx, &terms.uz_dh)?
    };
    let z_slope = sigmoid_slope(ops, &gates.z)?;
    let dz_dt = ops.mul(&z_slope, &da)?;

    let db = {
        let wx = ops.matvec(&cell.w_g, dx_dt, hd, f)?;
        let dr_h = ops.mul(&dr_dt, &lag.h_lag)?;
        let r_dh = ops.mul(&gates.r, &lag.dh_lag)?;
        let prod = ops.add(&dr_h, &r_dh)?;
        let u = ops.matvec(&cell.u_g, &prod, hd, hd)?;
        ops.add(&wx, &u)?
    };
    let g_sq = ops.square(&gates.g);
    let g_slope = ops.affine(&g_sq, -1.0, 1.0);
    let dg_dt = ops.mul(&g_slope, &db)?;

    Ok(GateDerivatives { dz_dt, dg_dt, dr_dt })
}

/// `dh/dt = dz/dt ⊙ ζ + z ⊙ (dh_lag − dg/dt) + dg/dt`.
pub fn hidden_derivative<O: Ops>(
    ops: &mut O,
    gates: &GateState<O::V>,
    derivs: &GateDerivatives<O::V>,
    lag: &LagState<O::V>,
) -> Result<O::V> {
    let first = ops.mul(&derivs.dz_dt, &gates.zeta)?;
    let dzeta = ops.sub(&lag.dh_lag, &derivs.dg_dt)?;
    let second = ops.mul(&gates.z, &dzeta)?;
    let s = ops.add(&first, &second)?;
    ops.add(&s, &derivs.dg_dt)
}

/// The full vector field: gates, gate derivatives, then `dh/dt`.
pub fn field<O: Ops>(
    ops: &mut O,
    cell: &GruCell<O::V>,
    x: &O::V,
    dx_dt: &O::V,
    lag: &LagState<O::V>,
) -> Result<O::V> {
    let terms = lag_terms(ops, cell, lag)?;
    field_with(ops, cell, x, dx_dt, lag, &terms)
}

/// [`field`] with precomputed [`LagTerms`].
pub fn field_with<O: Ops>(
    ops: &mut O,
    cell: &GruCell<O::V>,
    x: &O::V,
    dx_dt: &O::V,
    lag: &LagState<O::V>,
    terms: &LagTerms<O::V>,
) -> Result<O::V> {
    let gates = gate_states_with(ops, cell, x, lag, terms)?;
    let derivs = gate_derivatives_with(ops, cell, dx_dt, lag, &gates, terms)?;
    hidden_derivative(ops, &gates, &derivs, lag)
}

/// `h = z ⊙ h_lag + (1 − z) ⊙ g` evaluated eagerly.
pub fn hidden_state(gates: &GateState, lag: &LagState) -> Vec<f64> {
    gates
        .z
        .iter()
        .zip(&lag.h_lag)
        .zip(&gates.g)
        .map(|((z, h), g)| z * h + (1.0 - z) * g)
        .collect()
}

/// Eager convenience wrapper around [`field`].
pub fn field_eager(cell: &GruCellParams, x: &[f64], dx_dt: &[f64], lag: &LagState) -> Result<Vec<f64>> {
    field(&mut Eager, cell, &x.to_vec(), &dx_dt.to_vec(), lag)
}
