//! Stacked LSTM over batched sequences.
//!
//! Gate order inside the fused weight is input, forget, cell, output. Each
//! layer uses one weight `W` of shape `(in + hidden, 4 hidden)` applied to the
//! concatenation `[x_t | h_{t-1}]`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Axis};
use rand::Rng;

use super::{Matrix, Module, Param};

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `tanh` through one `exp`; several times cheaper than the libm routine.
fn tanh(v: f64) -> f64 {
    2.0 / (1.0 + (-2.0 * v).exp()) - 1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub w: Param,
    pub b: Param,
    hidden: usize,
}

/// Per-layer activations, stacked time-major: rows `t * batch .. (t + 1) * batch`
/// belong to step `t`.
#[derive(Debug, Clone)]
pub struct LayerCache {
    batch: usize,
    steps: usize,
    x: Matrix,
    h_prev: Matrix,
    c_prev: Matrix,
    /// Activated gates `[i | f | g | o]`.
    gates: Matrix,
    tanh_c: Matrix,
}

fn stack(seq: &[Matrix]) -> Matrix {
    let views: Vec<_> = seq.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

impl LstmLayer {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w = Param::uniform(format!("{name}.w"), input + hidden, 4 * hidden, bound, rng);
        let mut b = Param::uniform(format!("{name}.b"), 1, 4 * hidden, bound, rng);
        // forget-gate bias starts at 1
        b.value.slice_mut(s![.., hidden..2 * hidden]).fill(1.0);
        LstmLayer { w, b, hidden }
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.nrows() - self.hidden
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Runs the layer over `seq` (one `batch x input` matrix per time step)
    /// from zero initial state and returns all hidden states.
    pub fn forward(&self, seq: &[Matrix]) -> (Vec<Matrix>, LayerCache) {
        let steps = seq.len();
        let batch = seq.first().map_or(0, |x| x.nrows());
        let hd = self.hidden;
        let in_dim = self.input_dim();
        let x = stack(seq);
        let w_x = self.w.value.slice(s![..in_dim, ..]);
        let w_h = self.w.value.slice(s![in_dim.., ..]);
        // input projections for all steps at once
        let mut gates = x.dot(&w_x) + &self.b.value;
        let mut h_prev = Matrix::zeros((steps * batch, hd));
        let mut c_prev = Matrix::zeros((steps * batch, hd));
        let mut tanh_c = Matrix::zeros((steps * batch, hd));
        let mut hs = Vec::with_capacity(steps);
        let mut h = Matrix::zeros((batch, hd));
        let mut c = Matrix::zeros((batch, hd));
        for t in 0..steps {
            let rows = s![t * batch..(t + 1) * batch, ..];
            h_prev.slice_mut(rows).assign(&h);
            c_prev.slice_mut(rows).assign(&c);
            let mut g = gates.slice_mut(rows);
            general_mat_mul(1.0, &h, &w_h, 1.0, &mut g);
            g.slice_mut(s![.., ..2 * hd]).mapv_inplace(sigmoid);
            g.slice_mut(s![.., 2 * hd..3 * hd]).mapv_inplace(tanh);
            g.slice_mut(s![.., 3 * hd..]).mapv_inplace(sigmoid);
            let mut tc = tanh_c.slice_mut(rows);
            for r in 0..batch {
                for j in 0..hd {
                    let cv = g[[r, hd + j]] * c[[r, j]] + g[[r, j]] * g[[r, 2 * hd + j]];
                    let tv = tanh(cv);
                    c[[r, j]] = cv;
                    tc[[r, j]] = tv;
                    h[[r, j]] = g[[r, 3 * hd + j]] * tv;
                }
            }
            hs.push(h.clone());
        }
        (
            hs,
            LayerCache {
                batch,
                steps,
                x,
                h_prev,
                c_prev,
                gates,
                tanh_c,
            },
        )
    }

    /// Backpropagation through time. `dhs[t]` is the loss gradient with
    /// respect to the hidden state emitted at step `t` (`None` for zero).
    /// Returns the gradients with respect to the inputs.
    pub fn backward(&mut self, cache: &LayerCache, dhs: &[Option<Matrix>]) -> Vec<Matrix> {
        let hd = self.hidden;
        let in_dim = self.input_dim();
        let (batch, steps) = (cache.batch, cache.steps);
        let w_h = self.w.value.slice(s![in_dim.., ..]).to_owned();
        let mut dgates = Matrix::zeros((steps * batch, 4 * hd));
        let mut dh = Matrix::zeros((batch, hd));
        let mut dc = Matrix::zeros((batch, hd));
        for t in (0..steps).rev() {
            let rows = s![t * batch..(t + 1) * batch, ..];
            if let Some(d) = &dhs[t] {
                dh += d;
            }
            let g = cache.gates.slice(rows);
            let mut dg = dgates.slice_mut(rows);
            let (mut d_if, mut d_go) = dg.view_mut().split_at(Axis(1), 2 * hd);
            let (mut di, mut df) = d_if.view_mut().split_at(Axis(1), hd);
            let (mut dgg, mut d_o) = d_go.view_mut().split_at(Axis(1), hd);
            // elementwise gate gradients
            for r in 0..batch {
                for j in 0..hd {
                    let i = g[[r, j]];
                    let f = g[[r, hd + j]];
                    let gg = g[[r, 2 * hd + j]];
                    let o = g[[r, 3 * hd + j]];
                    let tc = cache.tanh_c[[t * batch + r, j]];
                    let cp = cache.c_prev[[t * batch + r, j]];
                    let dhv = dh[[r, j]];
                    let dcv = dhv * o * (1.0 - tc * tc) + dc[[r, j]];
                    di[[r, j]] = dcv * gg * i * (1.0 - i);
                    df[[r, j]] = dcv * cp * f * (1.0 - f);
                    dgg[[r, j]] = dcv * i * (1.0 - gg * gg);
                    d_o[[r, j]] = dhv * tc * o * (1.0 - o);
                    dc[[r, j]] = dcv * f;
                }
            }
            dh = dg.dot(&w_h.t());
        }
        self.w
            .grad
            .slice_mut(s![..in_dim, ..])
            .scaled_add(1.0, &cache.x.t().dot(&dgates));
        self.w
            .grad
            .slice_mut(s![in_dim.., ..])
            .scaled_add(1.0, &cache.h_prev.t().dot(&dgates));
        self.b.grad += &dgates.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dx = dgates.dot(&self.w.value.slice(s![..in_dim, ..]).t());
        (0..steps)
            .map(|t| dx.slice(s![t * batch..(t + 1) * batch, ..]).to_owned())
            .collect()
    }
}

impl Module for LstmLayer {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Stack of LSTM layers; the summary is the last hidden state of the top
/// layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    layers: Vec<LayerCache>,
    seq_len: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, num_layers: usize, rng: &mut R) -> Self {
        let layers = (0..num_layers)
            .map(|l| LstmLayer::new(&format!("{name}.l{l}"), if l == 0 { input } else { hidden }, hidden, rng))
            .collect();
        Lstm { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, LstmLayer::hidden)
    }

    pub fn forward(&self, seq: &[Matrix]) -> (Matrix, LstmCache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current: Vec<Matrix> = seq.to_vec();
        for layer in &self.layers {
            let (hs, cache) = layer.forward(&current);
            caches.push(cache);
            current = hs;
        }
        let last = current.pop().expect("sequence must be nonempty");
        (
            last,
            LstmCache {
                layers: caches,
                seq_len: seq.len(),
            },
        )
    }

    /// Forward pass without keeping a cache.
    pub fn infer(&self, seq: &[Matrix]) -> Matrix {
        self.forward(seq).0
    }

    /// Backward from the gradient of the final top-layer hidden state.
    pub fn backward(&mut self, cache: &LstmCache, d_last: &Matrix) -> Vec<Matrix> {
        let n = cache.seq_len;
        let mut dhs: Vec<Option<Matrix>> = vec![None; n];
        dhs[n - 1] = Some(d_last.clone());
        let mut dxs = Vec::new();
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers).rev() {
            dxs = layer.backward(lc, &dhs);
            dhs = dxs.iter().cloned().map(Some).collect();
        }
        dxs
    }
}

impl Module for Lstm {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
