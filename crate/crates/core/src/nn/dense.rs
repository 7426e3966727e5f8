use ndarray::Axis;
use rand::Rng;

use super::{Matrix, Module, Param};

/// Affine layer `y = x W + b` with `W` of shape `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Param,
    pub b: Param,
}

impl Dense {
    /// Fan-in scaled uniform initialization.
    pub fn new<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Dense {
            w: Param::uniform(format!("{name}.w"), fan_in, fan_out, bound, rng),
            b: Param::uniform(format!("{name}.b"), 1, fan_out, bound, rng),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.w.value.mapv_inplace(|v| v * factor);
        self.b.value.mapv_inplace(|v| v * factor);
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.ncols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        x.dot(&self.w.value) + &self.b.value
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Matrix, dy: &Matrix) -> Matrix {
        self.w.grad += &x.t().dot(dy);
        self.b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.value.t())
    }

    /// Input gradient only; parameter gradients are left untouched.
    pub fn backward_input(&self, dy: &Matrix) -> Matrix {
        dy.dot(&self.w.value.t())
    }
}

impl Module for Dense {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    x.mapv(|v| v.max(0.0))
}

/// `dy` masked where the ReLU input was not positive.
pub fn relu_backward(pre: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0
        }
    });
    dx
}
