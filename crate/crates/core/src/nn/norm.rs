use ndarray::Axis;
use rand::Rng;

use super::{Matrix, Module, Param};

/// Per-row normalization to zero mean and unit variance followed by a learned
/// affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: Param::new(format!("{name}.gamma"), Matrix::ones((1, width))),
            beta: Param::new(format!("{name}.beta"), Matrix::zeros((1, width))),
            eps: 1e-8,
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let y = &xhat * &self.gamma.value + &self.beta.value;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Matrix) -> Matrix {
        self.gamma.grad += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma.value;
        let n = dy.ncols() as f64;
        let mut dx = Matrix::zeros(dy.raw_dim());
        for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
            let g = dxhat.row(r);
            let xh = cache.xhat.row(r);
            let sum_g = g.sum();
            let sum_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
            let is = cache.inv_std[r];
            for c in 0..out.len() {
                out[c] = is / n * (n * g[c] - sum_g - xh[c] * sum_gx);
            }
        }
        dx
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Inverted dropout. Returns the output and the scaled keep mask, or `None`
/// when the pass is the identity (evaluation or zero rate).
pub fn dropout<R: Rng + ?Sized>(x: &Matrix, rate: f64, train: bool, rng: &mut R) -> (Matrix, Option<Matrix>) {
    if !train || rate <= 0.0 {
        return (x.clone(), None);
    }
    let keep = 1.0 - rate;
    let mask = Matrix::from_shape_fn(x.raw_dim(), |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    (x * &mask, Some(mask))
}
