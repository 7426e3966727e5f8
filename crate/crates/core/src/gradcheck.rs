//! Central finite-difference checks for every differentiable primitive.

use rand::{Rng, SeedableRng};

use crate::learner::{quantile_huber_loss, squash_backward, squash_sample, standard_normal, Actor, Block, Critic, Trunk};
use crate::nn::{relu, relu_backward, Dense, LayerNorm, Lstm, Matrix, Module};
use crate::seeds::StreamRng;

/// `||a - n|| / max(||a|| + ||n||, 1e-12)`.
pub fn rel_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let scale = analytic.mapv(|v| v * v).sum().sqrt() + numeric.mapv(|v| v * v).sum().sqrt();
    diff / scale.max(1e-12)
}

/// Numerical gradient of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Matrix, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let h = 1e-6;
    let mut g = Matrix::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = xp[[r, c]];
        xp[[r, c]] = orig + h;
        let fp = f(&xp);
        xp[[r, c]] = orig - h;
        let fm = f(&xp);
        xp[[r, c]] = orig;
        g[[r, c]] = (fp - fm) / (2.0 * h);
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub primitive: &'static str,
    pub repetitions: usize,
    /// Worst relative error over all repetitions and checked tensors.
    pub max_rel_error: f64,
}

fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn fixed(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

// Worst error of the parameter gradient of `p` in `m` against finite
// differences of `loss`.
fn param_error<M: Module + Clone>(m: &M, which: usize, loss: impl Fn(&M) -> f64) -> f64 {
    let value = m.params()[which].value.clone();
    let num = numeric_grad(&value, |v| {
        let mut c = m.clone();
        c.params_mut()[which].value = v.clone();
        loss(&c)
    });
    rel_error(&m.params()[which].grad, &num)
}

fn all_params<M: Module + Clone>(m: &M, loss: impl Fn(&M) -> f64) -> f64 {
    (0..m.params().len()).map(|i| param_error(m, i, &loss)).fold(0.0, f64::max)
}

// ReLU nets are checked away from the kink where the derivative jumps.
fn near_kink(pre: &Matrix) -> bool {
    pre.iter().any(|v| v.abs() < 1e-4)
}

/// Runs `reps` randomized checks per primitive with shapes varying by
/// repetition. Draws that land near a ReLU or Huber kink are redrawn.
pub fn run_suite(reps: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = fixed(seed);
    let mut out = Vec::new();
    let mut push = |primitive, errs: Vec<f64>| {
        out.push(CheckResult {
            primitive,
            repetitions: errs.len(),
            max_rel_error: errs.into_iter().fold(0.0, f64::max),
        })
    };

    let mut errs = Vec::new();
    for rep in 0..reps * 4 {
        if errs.len() == reps {
            break;
        }
        let (b, i, o) = (1 + rep % 4, 1 + rep % 5, 1 + (rep * 3) % 6);
        let mut l = Dense::new("d", i, o, &mut rng);
        let x = random(b, i, &mut rng);
        let proj = random(b, o, &mut rng);
        l.zero_grad();
        let dx = l.backward(&x, &proj);
        let e = rel_error(&dx, &numeric_grad(&x, |xp| (l.forward(xp) * &proj).sum()));
        errs.push(e.max(all_params(&l, |c| (c.forward(&x) * &proj).sum())));
    }
    push("dense", errs);

    let mut errs = Vec::new();
    for rep in 0..reps * 4 {
        if errs.len() == reps {
            break;
        }
        let x = random(1 + rep % 3, 2 + rep % 4, &mut rng).mapv(|v| if v.abs() < 0.05 { 0.3 } else { v });
        let proj = random(x.nrows(), x.ncols(), &mut rng);
        let dx = relu_backward(&x, &proj);
        errs.push(rel_error(&dx, &numeric_grad(&x, |xp| (relu(xp) * &proj).sum())));
    }
    push("relu", errs);

    let mut errs = Vec::new();
    for rep in 0..reps * 4 {
        if errs.len() == reps {
            break;
        }
        // width 2 makes the input gradient vanish identically
        let (b, w) = (1 + rep % 3, 3 + rep % 6);
        let mut ln = LayerNorm::new("ln", w);
        ln.gamma.value = random(1, w, &mut rng);
        ln.beta.value = random(1, w, &mut rng);
        let x = random(b, w, &mut rng);
        let proj = random(b, w, &mut rng);
        let (_, cache) = ln.forward(&x);
        ln.zero_grad();
        let dx = ln.backward(&cache, &proj);
        let e = rel_error(&dx, &numeric_grad(&x, |xp| (ln.forward(xp).0 * &proj).sum()));
        errs.push(e.max(all_params(&ln, |c| (c.forward(&x).0 * &proj).sum())));
    }
    push("layer_norm", errs);

    let mut errs = Vec::new();
    for rep in 0..reps * 4 {
        if errs.len() == reps {
            break;
        }
        let (b, i, w) = (2 + rep % 3, 1 + rep % 4, 3 + rep % 4);
        let mut block = Block::new("b", i, w, 0.1 + 0.02 * (rep % 5) as f64, rep % 2 == 0, &mut rng);
        let x = random(b, i, &mut rng);
        let proj = random(b, w, &mut rng);
        // one mask seed reproduces the same dropout mask in every pass
        let mask_seed = 100 + rep as u64;
        let f = |bl: &Block, x: &Matrix| (bl.forward(x, true, &mut fixed(mask_seed)).0 * &proj).sum();
        let (_, cache) = block.forward(&x, true, &mut fixed(mask_seed));
        if near_kink(cache.pre()) {
            continue;
        }
        block.zero_grad();
        let dx = block.backward(&cache, &proj);
        let e = rel_error(&dx, &numeric_grad(&x, |xp| f(&block, xp)));
        errs.push(e.max(all_params(&block, |c| f(c, &x))));
    }
    push("dropout_block", errs);

    let mut errs = Vec::new();
    for rep in 0..reps * 4 {
        if errs.len() == reps {
            break;
        }
        let (batch, input, hidden, layers, t) = (1 + rep % 3, 1 + rep % 4, 1 + rep % 3, 1 + rep % 2, 2 + rep % 4);
        let mut net = Lstm::new("lstm", input, hidden, layers, &mut rng);
        let seq: Vec<Matrix> = (0..t).map(|_| random(batch, input, &mut rng)).collect();
        let proj = random(batch, hidden, &mut rng);
        let f = |n: &Lstm, s: &[Matrix]| (n.infer(s) * &proj).sum();
        let (_, cache) = net.forward(&seq);
        net.zero_grad();
        let dxs = net.backward(&cache, &proj);
        let mut e: f64 = 0.0;
        for (step, dx) in dxs.iter().enumerate() {
            let nx = numeric_grad(&seq[step], |xp| {
                let mut s = seq.clone();
                s[step] = xp.clone();
                f(&net, &s)
            });
            e = e.max(rel_error(dx, &nx));
        }
        errs.push(e.max(all_params(&net, |c| f(c, &seq))));
    }
    push("lstm", errs);

    let mut errs = Vec::new();
    for rep in 0..reps * 4 {
        if errs.len() == reps {
            break;
        }
        let (b, d) = (1 + rep % 3, 1 + rep % 4);
        let mu = random(b, d, &mut rng);
        let ls = random(b, d, &mut rng);
        let eps = standard_normal(b, d, &mut rng);
        let pa = random(b, d, &mut rng);
        let pl = random(b, 1, &mut rng);
        let f = |m: &Matrix, l: &Matrix| {
            let s = squash_sample(m, l, eps.clone());
            (&s.action * &pa).sum() + (&s.log_prob * &pl).sum()
        };
        let s = squash_sample(&mu, &ls, eps.clone());
        let (dm, dl) = squash_backward(&s, &pa, &pl);
        let e1 = rel_error(&dm, &numeric_grad(&mu, |m| f(m, &ls)));
        let e2 = rel_error(&dl, &numeric_grad(&ls, |l| f(&mu, l)));
        errs.push(e1.max(e2));
    }
    push("tanh_gaussian", errs);

    let mut errs = Vec::new();
    for rep in 0..reps * 4 {
        if errs.len() == reps {
            break;
        }
        let (b, m, n) = (1 + rep % 3, 2 + rep % 5, 1 + rep % 6);
        let pred = random(b, m, &mut rng);
        let targets = random(b, n, &mut rng).mapv(|v| 2.5 * v);
        // |u| = kappa is a second-order kink, keep clear of it and of u = 0
        if pred.iter().any(|p| targets.iter().any(|t| ((t - p).abs() - 1.0).abs() < 1e-3 || (t - p).abs() < 1e-3)) {
            continue;
        }
        let (_, g) = quantile_huber_loss(&pred, &targets, 1.0);
        errs.push(rel_error(&g, &numeric_grad(&pred, |p| quantile_huber_loss(p, &targets, 1.0).0)));
    }
    push("quantile_huber", errs);

    let mut errs = Vec::new();
    for rep in 0..reps * 4 {
        if errs.len() == reps {
            break;
        }
        let (b, i, w, depth) = (2 + rep % 3, 1 + rep % 4, 3 + rep % 4, 1 + rep % 2);
        let mut trunk = Trunk::new("t", i, w, depth, 0.0, rep % 2 == 0, &mut rng);
        let x = random(b, i, &mut rng);
        let proj = random(b, w, &mut rng);
        let f = |t: &Trunk, x: &Matrix| (t.forward(x, false, &mut fixed(0)).0 * &proj).sum();
        let (_, caches) = trunk.forward(&x, false, &mut fixed(0));
        if caches.iter().any(|c| near_kink(c.pre())) {
            continue;
        }
        trunk.zero_grad();
        let dx = trunk.backward(&caches, &proj);
        let e = rel_error(&dx, &numeric_grad(&x, |xp| f(&trunk, xp)));
        errs.push(e.max(all_params(&trunk, |c| f(c, &x))));
    }
    push("trunk", errs);

    let mut errs = Vec::new();
    for rep in 0..reps * 4 {
        if errs.len() == reps {
            break;
        }
        let (b, zd, ad) = (1 + rep % 3, 2 + rep % 3, 1 + rep % 2);
        let mut critic = Critic::new("c", zd, ad, 5, 2, 3, 0.05, true, &mut rng);
        let z = random(b, zd, &mut rng);
        let a = random(b, ad, &mut rng);
        let proj = random(b, 3, &mut rng);
        let mask_seed = 200 + rep as u64;
        let f = |c: &Critic, z: &Matrix, a: &Matrix| (c.forward(z, a, true, &mut fixed(mask_seed)).0 * &proj).sum();
        let (_, cache) = critic.forward(&z, &a, true, &mut fixed(mask_seed));
        if cache.blocks().iter().any(|c| near_kink(c.pre())) {
            continue;
        }
        critic.zero_grad();
        let (dz, da) = critic.backward(&cache, &proj);
        let e1 = rel_error(&dz, &numeric_grad(&z, |zp| f(&critic, zp, &a)));
        let e2 = rel_error(&da, &numeric_grad(&a, |ap| f(&critic, &z, ap)));
        errs.push(e1.max(e2).max(all_params(&critic, |c| f(c, &z, &a))));
    }
    push("critic", errs);

    let mut errs = Vec::new();
    for rep in 0..reps * 4 {
        if errs.len() == reps {
            break;
        }
        let (b, zd, ad) = (1 + rep % 3, 2 + rep % 3, 1 + rep % 3);
        let mut actor = Actor::new(zd, 4, 1 + rep % 2, ad, 0.0, false, &mut rng);
        // larger heads so the check is not dominated by rounding
        actor.mu.scale(20.0);
        actor.log_std.scale(20.0);
        let z = random(b, zd, &mut rng);
        let pm = random(b, ad, &mut rng);
        let pl = random(b, ad, &mut rng);
        let f = |ac: &Actor, z: &Matrix| {
            let (m, l, _) = ac.forward(z, false, &mut fixed(0));
            (m * &pm).sum() + (l * &pl).sum()
        };
        let (_, _, cache) = actor.forward(&z, false, &mut fixed(0));
        if cache.blocks().iter().any(|c| near_kink(c.pre())) {
            continue;
        }
        actor.zero_grad();
        let dz = actor.backward(&cache, &pm, &pl);
        let e = rel_error(&dz, &numeric_grad(&z, |zp| f(&actor, zp)));
        errs.push(e.max(all_params(&actor, |c| f(c, &z))));
    }
    push("actor", errs);

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in run_suite(20, 0) {
            assert!(r.max_rel_error < 1e-4, "{r:?}");
            assert_eq!(r.repetitions, 20, "{r:?}");
        }
    }
}
