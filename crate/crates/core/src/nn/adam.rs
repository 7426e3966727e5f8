use serde::{Deserialize, Serialize};

use super::{Matrix, NamedArray, Param};
use crate::error::{Error, Result};

/// Adaptive-moment optimizer. Moment buffers are created lazily on the first
/// step and matched to parameters by position.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<NamedArray>,
    pub v: Vec<NamedArray>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut Param>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Matrix::zeros(p.value.raw_dim())).collect();
            self.v = self.m.clone();
        }
        debug_assert_eq!(self.m.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    pub fn state(&self) -> AdamState {
        let named = |ms: &[Matrix]| {
            ms.iter()
                .enumerate()
                .map(|(i, m)| NamedArray::from_matrix(&i.to_string(), m))
                .collect()
        };
        AdamState {
            t: self.t,
            m: named(&self.m),
            v: named(&self.v),
        }
    }

    pub fn load_state(&mut self, state: &AdamState) -> Result<()> {
        if state.m.len() != state.v.len() {
            return Err(Error::Fault("optimizer moment counts differ".into()));
        }
        self.t = state.t;
        self.m = state.m.iter().map(NamedArray::to_matrix).collect::<Result<_>>()?;
        self.v = state.v.iter().map(NamedArray::to_matrix).collect::<Result<_>>()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first update is lr * sign(g)
        let mut p = Param::new("p", Matrix::from_elem((1, 2), 1.0));
        p.grad = Matrix::from_shape_vec((1, 2), vec![0.5, -2.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(vec![&mut p]);
        assert!((p.value[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.value[[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Param::new("p", Matrix::from_elem((1, 1), 3.0));
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            p.grad = p.value.mapv(|v| 2.0 * (v - 1.0));
            opt.step(vec![&mut p]);
        }
        assert!((p.value[[0, 0]] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn state_round_trip() {
        let mut p = Param::new("p", Matrix::from_elem((2, 2), 1.0));
        p.grad.fill(0.3);
        let mut opt = Adam::new(0.01);
        opt.step(vec![&mut p]);
        let mut other = Adam::new(0.01);
        other.load_state(&opt.state()).unwrap();
        assert_eq!(other, opt);
    }
}
