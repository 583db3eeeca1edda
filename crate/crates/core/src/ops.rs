//! Vector primitives shared by eager evaluation and the recording tape.
//!
//! Model code is written once against [`Ops`]; running it with [`Eager`]
//! computes plain values, running it with [`crate::autodiff::Tape`] records
//! the same computation for reverse-mode differentiation.

use crate::error::{ensure_len, shape_err, Error, Result};
use crate::tensor;

pub trait Ops {
    /// Handle to a vector value.
    type V: Clone + std::fmt::Debug;

    /// Introduces a value that is not differentiated through.
    fn constant(&mut self, value: Vec<f64>) -> Self::V;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a [f64];

    /// `w · x` where `w` is a flattened row-major `rows × cols` matrix.
    fn matvec(&mut self, w: &Self::V, x: &Self::V, rows: usize, cols: usize) -> Result<Self::V>;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;

    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;

    /// Elementwise product.
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;

    /// `scale · a + offset`, elementwise.
    fn affine(&mut self, a: &Self::V, scale: f64, offset: f64) -> Self::V;

    fn sigmoid(&mut self, a: &Self::V) -> Self::V;

    fn tanh(&mut self, a: &Self::V) -> Self::V;

    fn square(&mut self, a: &Self::V) -> Self::V;

    /// Sum of all entries, as a length-1 vector.
    fn sum(&mut self, a: &Self::V) -> Self::V;

    /// Mean of all entries, as a length-1 vector.
    fn mean(&mut self, a: &Self::V) -> Result<Self::V>;

    /// Picks `a[indices[k]]` for every `k`. Covers slicing and reshaping.
    fn gather(&mut self, a: &Self::V, indices: &[usize]) -> Result<Self::V>;

    fn concat(&mut self, parts: &[Self::V]) -> Self::V;

    /// Soft temporal distortion index of `pred` against a fixed `target`.
    fn soft_tdi(&mut self, pred: &Self::V, target: &[f64], gamma: f64) -> Result<Self::V>;

    fn scale(&mut self, a: &Self::V, factor: f64) -> Self::V {
        self.affine(a, factor, 0.0)
    }

    fn len(&self, v: &Self::V) -> usize {
        self.value(v).len()
    }

    /// Contiguous slice `[start, start + len)`.
    fn slice(&mut self, a: &Self::V, start: usize, len: usize) -> Result<Self::V> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(a, &idx)
    }

    /// Mean squared error between two equally long vectors.
    fn mse(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        let d = self.sub(a, b)?;
        let sq = self.square(&d);
        self.mean(&sq)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn check_gather(len: usize, indices: &[usize]) -> Result<()> {
    match indices.iter().find(|&&i| i >= len) {
        Some(&i) => Err(shape_err("gather", format!("index < {len}"), i)),
        None => Ok(()),
    }
}

/// Plain evaluation: every handle is the value itself.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

fn zip_with(
    context: &'static str,
    a: &[f64],
    b: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Result<Vec<f64>> {
    ensure_len(context, a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
}

impl Ops for Eager {
    type V = Vec<f64>;

    fn constant(&mut self, value: Vec<f64>) -> Vec<f64> {
        value
    }

    fn value<'a>(&'a self, v: &'a Vec<f64>) -> &'a [f64] {
        v
    }

    fn matvec(&mut self, w: &Vec<f64>, x: &Vec<f64>, rows: usize, cols: usize) -> Result<Vec<f64>> {
        ensure_len("matvec weights", rows * cols, w.len())?;
        ensure_len("matvec input", cols, x.len())?;
        Ok(tensor::matvec(w, x, rows, cols))
    }

    fn add(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Result<Vec<f64>> {
        zip_with("add", a, b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Result<Vec<f64>> {
        zip_with("sub", a, b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Result<Vec<f64>> {
        zip_with("mul", a, b, |x, y| x * y)
    }

    fn affine(&mut self, a: &Vec<f64>, scale: f64, offset: f64) -> Vec<f64> {
        a.iter().map(|&x| scale * x + offset).collect()
    }

    fn sigmoid(&mut self, a: &Vec<f64>) -> Vec<f64> {
        a.iter().map(|&x| sigmoid(x)).collect()
    }

    fn tanh(&mut self, a: &Vec<f64>) -> Vec<f64> {
        a.iter().map(|&x| x.tanh()).collect()
    }

    fn square(&mut self, a: &Vec<f64>) -> Vec<f64> {
        a.iter().map(|&x| x * x).collect()
    }

    fn sum(&mut self, a: &Vec<f64>) -> Vec<f64> {
        vec![a.iter().sum()]
    }

    fn mean(&mut self, a: &Vec<f64>) -> Result<Vec<f64>> {
        if a.is_empty() {
            return Err(Error::InsufficientData("mean of an empty vector".into()));
        }
        Ok(vec![a.iter().sum::<f64>() / a.len() as f64])
    }

    fn gather(&mut self, a: &Vec<f64>, indices: &[usize]) -> Result<Vec<f64>> {
        check_gather(a.len(), indices)?;
        Ok(indices.iter().map(|&i| a[i]).collect())
    }

    fn concat(&mut self, parts: &[Vec<f64>]) -> Vec<f64> {
        parts.concat()
    }

    fn soft_tdi(&mut self, pred: &Vec<f64>, target: &[f64], gamma: f64) -> Result<Vec<f64>> {
        Ok(vec![crate::metrics::soft_tdi(pred, target, gamma)?])
    }
}
