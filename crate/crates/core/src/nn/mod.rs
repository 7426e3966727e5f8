//! Minimal neural-network layers with hand-written backward passes.
//!
//! Every layer keeps its parameters in [`Param`]s that carry an accumulated
//! gradient. A forward pass returns the output plus whatever cache the
//! backward pass needs; backward passes add into `Param::grad` and return the
//! gradient with respect to the layer input.

mod adam;
mod dense;
mod lstm;
mod norm;

pub use adam::{Adam, AdamState};
pub use dense::{relu, relu_backward, Dense};
pub use lstm::{Lstm, LstmCache, LstmLayer};
pub use norm::{dropout, LayerNorm, LayerNormCache};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(name: impl Into<String>, rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let value = Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound));
        Param::new(name, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Named flat parameter array used in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_matrix(name: &str, m: &Matrix) -> Self {
        NamedArray {
            name: name.to_string(),
            shape: [m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| Error::Fault(format!("array `{}`: {e}", self.name)))
    }
}

pub fn export_params<M: Module + ?Sized>(m: &M) -> Vec<NamedArray> {
    m.params()
        .into_iter()
        .map(|p| NamedArray::from_matrix(&p.name, &p.value))
        .collect()
}

pub fn import_params<M: Module + ?Sized>(m: &mut M, arrays: &[NamedArray]) -> Result<()> {
    let mut params = m.params_mut();
    if params.len() != arrays.len() {
        return Err(Error::Fault(format!(
            "parameter count mismatch: model has {}, file has {}",
            params.len(),
            arrays.len()
        )));
    }
    for (p, a) in params.iter_mut().zip(arrays) {
        if p.name != a.name || p.value.shape() != a.shape {
            return Err(Error::Fault(format!(
                "parameter mismatch: model `{}` {:?}, file `{}` {:?}",
                p.name,
                p.value.shape(),
                a.name,
                a.shape
            )));
        }
        p.value = a.to_matrix()?;
    }
    Ok(())
}

/// `target <- (1 - rho) target + rho online` for every parameter.
pub fn polyak_update<M: Module + ?Sized>(target: &mut M, online: &M, rho: f64) -> Result<()> {
    let src = online.params();
    let mut dst = target.params_mut();
    if src.len() != dst.len() {
        return Err(Error::Fault("target/online parameter count mismatch".into()));
    }
    for (t, o) in dst.iter_mut().zip(src) {
        if t.value.shape() != o.value.shape() {
            return Err(Error::Fault(format!("shape mismatch for `{}`", o.name)));
        }
        t.value.zip_mut_with(&o.value, |tv, &ov| *tv = (1.0 - rho) * *tv + rho * ov);
    }
    Ok(())
}

/// Horizontal concatenation `[a | b]`.
pub fn hcat(a: &Matrix, b: &Matrix) -> Matrix {
    ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()]).expect("row counts match")
}

/// Splits columns at `at`.
pub fn hsplit(m: &Matrix, at: usize) -> (Matrix, Matrix) {
    (
        m.slice(ndarray::s![.., ..at]).to_owned(),
        m.slice(ndarray::s![.., at..]).to_owned(),
    )
}

#[cfg(test)]
pub(crate) mod gradcheck {
    pub use crate::gradcheck::{numeric_grad, rel_error};
}
