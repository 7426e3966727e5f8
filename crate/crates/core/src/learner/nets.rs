//! Actor and critic networks built from regularized dense blocks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::nn::{dropout, hcat, relu, relu_backward, Dense, LayerNorm, LayerNormCache, Matrix, Module, Param};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// `dense -> dropout -> layer norm -> relu`; dropout and layer norm are
/// optional.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub dense: Dense,
    pub ln: Option<LayerNorm>,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    x: Matrix,
    mask: Option<Matrix>,
    ln: Option<LayerNormCache>,
    pre: Matrix,
}

impl BlockCache {
    /// Pre-activation of the block's ReLU.
    pub fn pre(&self) -> &Matrix {
        &self.pre
    }
}

impl Block {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, width: usize, dropout: f64, layer_norm: bool, rng: &mut R) -> Self {
        Block {
            dense: Dense::new(&format!("{name}.dense"), input, width, rng),
            ln: layer_norm.then(|| LayerNorm::new(&format!("{name}.ln"), width)),
            dropout,
        }
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Matrix, train: bool, rng: &mut R) -> (Matrix, BlockCache) {
        let h = self.dense.forward(x);
        let (h, mask) = dropout(&h, self.dropout, train, rng);
        let (pre, ln) = match &self.ln {
            Some(ln) => {
                let (y, c) = ln.forward(&h);
                (y, Some(c))
            }
            None => (h, None),
        };
        let y = relu(&pre);
        (
            y,
            BlockCache {
                x: x.clone(),
                mask,
                ln,
                pre,
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &Matrix) -> Matrix {
        let mut d = relu_backward(&cache.pre, dy);
        if let (Some(ln), Some(c)) = (self.ln.as_mut(), cache.ln.as_ref()) {
            d = ln.backward(c, &d);
        }
        if let Some(mask) = &cache.mask {
            d *= mask;
        }
        self.dense.backward(&cache.x, &d)
    }
}

impl Module for Block {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.dense.params();
        if let Some(ln) = &self.ln {
            p.extend(ln.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.dense.params_mut();
        if let Some(ln) = &mut self.ln {
            p.extend(ln.params_mut());
        }
        p
    }
}

/// A stack of blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub blocks: Vec<Block>,
}

impl Trunk {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        width: usize,
        depth: usize,
        dropout: f64,
        layer_norm: bool,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| {
                let fan_in = if i == 0 { input } else { width };
                Block::new(&format!("{name}.block{i}"), fan_in, width, dropout, layer_norm, rng)
            })
            .collect();
        Trunk { blocks }
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Matrix, train: bool, rng: &mut R) -> (Matrix, Vec<BlockCache>) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h, train, rng);
            caches.push(c);
            h = y;
        }
        (h, caches)
    }

    pub fn backward(&mut self, caches: &[BlockCache], dy: &Matrix) -> Matrix {
        let mut d = dy.clone();
        for (b, c) in self.blocks.iter_mut().zip(caches).rev() {
            d = b.backward(c, &d);
        }
        d
    }
}

impl Module for Trunk {
    fn params(&self) -> Vec<&Param> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}

/// Squashed Gaussian policy head on top of a trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub trunk: Trunk,
    pub mu: Dense,
    pub log_std: Dense,
}

#[derive(Debug, Clone)]
pub struct ActorCache {
    trunk: Vec<BlockCache>,
    hidden: Matrix,
    raw_log_std: Matrix,
}

impl ActorCache {
    pub fn blocks(&self) -> &[BlockCache] {
        &self.trunk
    }
}

/// Output of a reparameterized policy sample.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub mu: Matrix,
    pub log_std: Matrix,
    pub eps: Matrix,
    /// Pre-squash sample `mu + std * eps`.
    pub u: Matrix,
    /// `tanh(u)`.
    pub action: Matrix,
    /// Log-density of `action`, one column.
    pub log_prob: Matrix,
}

impl Actor {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        width: usize,
        depth: usize,
        action_dim: usize,
        dropout: f64,
        layer_norm: bool,
        rng: &mut R,
    ) -> Self {
        let trunk = Trunk::new("actor", input, width, depth, dropout, layer_norm, rng);
        let head_in = if depth == 0 { input } else { width };
        let mut mu = Dense::new("actor.mu", head_in, action_dim, rng);
        let mut log_std = Dense::new("actor.log_std", head_in, action_dim, rng);
        mu.scale(1e-2);
        log_std.scale(1e-2);
        Actor { trunk, mu, log_std }
    }

    /// Returns the mean and clamped log-std.
    pub fn forward<R: Rng + ?Sized>(&self, z: &Matrix, train: bool, rng: &mut R) -> (Matrix, Matrix, ActorCache) {
        let (hidden, trunk) = self.trunk.forward(z, train, rng);
        let mu = self.mu.forward(&hidden);
        let raw_log_std = self.log_std.forward(&hidden);
        let log_std = raw_log_std.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        (
            mu,
            log_std,
            ActorCache {
                trunk,
                hidden,
                raw_log_std,
            },
        )
    }

    /// Backward from gradients with respect to the mean and clamped log-std.
    pub fn backward(&mut self, cache: &ActorCache, d_mu: &Matrix, d_log_std: &Matrix) -> Matrix {
        let mut d_ls = d_log_std.clone();
        d_ls.zip_mut_with(&cache.raw_log_std, |d, &r| {
            if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&r) {
                *d = 0.0;
            }
        });
        let dh = self.mu.backward(&cache.hidden, d_mu) + self.log_std.backward(&cache.hidden, &d_ls);
        self.trunk.backward(&cache.trunk, &dh)
    }
}

impl Module for Actor {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.trunk.params();
        p.extend(self.mu.params());
        p.extend(self.log_std.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.trunk.params_mut();
        p.extend(self.mu.params_mut());
        p.extend(self.log_std.params_mut());
        p
    }
}

/// `log(1 - tanh(u)^2)` in a form that stays finite for large `|u|`.
pub fn log_squash_jacobian(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Reparameterized sample from the squashed Gaussian with the given noise.
pub fn squash_sample(mu: &Matrix, log_std: &Matrix, eps: Matrix) -> PolicySample {
    let u = mu + &(log_std.mapv(f64::exp) * &eps);
    let action = u.mapv(f64::tanh);
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut log_prob = Matrix::zeros((mu.nrows(), 1));
    for r in 0..mu.nrows() {
        let mut s = 0.0;
        for c in 0..mu.ncols() {
            let e = eps[[r, c]];
            s += -0.5 * e * e - log_std[[r, c]] - half_ln_2pi - log_squash_jacobian(u[[r, c]]);
        }
        log_prob[[r, 0]] = s;
    }
    PolicySample {
        mu: mu.clone(),
        log_std: log_std.clone(),
        eps,
        u,
        action,
        log_prob,
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Pulls gradients with respect to the action and the log-density back to
/// the mean and log-std. `d_logp` has one column.
pub fn squash_backward(s: &PolicySample, d_action: &Matrix, d_logp: &Matrix) -> (Matrix, Matrix) {
    let mut d_mu = Matrix::zeros(s.mu.raw_dim());
    let mut d_ls = Matrix::zeros(s.mu.raw_dim());
    for r in 0..s.mu.nrows() {
        let dl = d_logp[[r, 0]];
        for c in 0..s.mu.ncols() {
            let a = s.action[[r, c]];
            // d logp / du = 2 tanh(u); d logp / d log_std (explicit) = -1
            let du = d_action[[r, c]] * (1.0 - a * a) + dl * 2.0 * a;
            d_mu[[r, c]] = du;
            d_ls[[r, c]] = du * s.log_std[[r, c]].exp() * s.eps[[r, c]] - dl;
        }
    }
    (d_mu, d_ls)
}

/// One member of the quantile critic ensemble on `[z | a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub trunk: Trunk,
    pub out: Dense,
}

#[derive(Debug, Clone)]
pub struct CriticCache {
    trunk: Vec<BlockCache>,
    hidden: Matrix,
    z_dim: usize,
}

impl CriticCache {
    pub fn blocks(&self) -> &[BlockCache] {
        &self.trunk
    }
}

impl Critic {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        z_dim: usize,
        action_dim: usize,
        width: usize,
        depth: usize,
        quantiles: usize,
        dropout: f64,
        layer_norm: bool,
        rng: &mut R,
    ) -> Self {
        let input = z_dim + action_dim;
        let trunk = Trunk::new(name, input, width, depth, dropout, layer_norm, rng);
        let head_in = if depth == 0 { input } else { width };
        Critic {
            trunk,
            out: Dense::new(&format!("{name}.out"), head_in, quantiles, rng),
        }
    }

    pub fn forward<R: Rng + ?Sized>(&self, z: &Matrix, a: &Matrix, train: bool, rng: &mut R) -> (Matrix, CriticCache) {
        let x = hcat(z, a);
        let (hidden, trunk) = self.trunk.forward(&x, train, rng);
        let q = self.out.forward(&hidden);
        (
            q,
            CriticCache {
                trunk,
                hidden,
                z_dim: z.ncols(),
            },
        )
    }

    /// Returns `(dz, da)`.
    pub fn backward(&mut self, cache: &CriticCache, dq: &Matrix) -> (Matrix, Matrix) {
        let dh = self.out.backward(&cache.hidden, dq);
        let dx = self.trunk.backward(&cache.trunk, &dh);
        crate::nn::hsplit(&dx, cache.z_dim)
    }
}

impl Module for Critic {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.trunk.params();
        p.extend(self.out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.trunk.params_mut();
        p.extend(self.out.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{numeric_grad, rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn squash_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for rep in 0..20 {
            let (b, d) = (1 + rep % 3, 1 + rep % 4);
            let mu = random(b, d, &mut rng);
            let ls = random(b, d, &mut rng);
            let eps = standard_normal(b, d, &mut rng);
            let pa = random(b, d, &mut rng);
            let pl = random(b, 1, &mut rng);
            let loss = |m: &Matrix, l: &Matrix| {
                let s = squash_sample(m, l, eps.clone());
                (&s.action * &pa).sum() + (&s.log_prob * &pl).sum()
            };
            let s = squash_sample(&mu, &ls, eps.clone());
            let (dm, dl) = squash_backward(&s, &pa, &pl);
            assert!(rel_error(&dm, &numeric_grad(&mu, |m| loss(m, &ls))) < 1e-4);
            assert!(rel_error(&dl, &numeric_grad(&ls, |l| loss(&mu, l))) < 1e-4);
        }
    }

    #[test]
    fn log_prob_matches_change_of_variables() {
        let mu = Matrix::from_elem((1, 1), 0.3);
        let ls = Matrix::from_elem((1, 1), -0.5);
        let eps = Matrix::from_elem((1, 1), 0.7);
        let s = squash_sample(&mu, &ls, eps);
        let u = 0.3 + (-0.5f64).exp() * 0.7;
        let sd = (-0.5f64).exp();
        let normal = (-(u - 0.3f64).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        let expected = normal.ln() - (1.0 - u.tanh().powi(2)).ln();
        assert!((s.log_prob[[0, 0]] - expected).abs() < 1e-12);
        // stable for large pre-activations
        assert!(log_squash_jacobian(40.0).is_finite());
        assert!(log_squash_jacobian(-40.0).is_finite());
    }

    #[test]
    fn block_and_trunk_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for rep in 0..20 {
            let (b, i, w, depth) = (2 + rep % 3, 1 + rep % 4, 3 + rep % 4, 1 + rep % 2);
            let mut trunk = Trunk::new("t", i, w, depth, 0.0, rep % 2 == 0, &mut rng);
            // keep ReLU inputs away from the kink
            let x = random(b, i, &mut rng);
            let proj = random(b, w, &mut rng);
            let loss = |t: &Trunk, x: &Matrix| (t.forward(x, false, &mut ChaCha8Rng::seed_from_u64(0)).0 * &proj).sum();
            let (_, caches) = trunk.forward(&x, false, &mut rng);
            if caches.iter().any(|c| c.pre.iter().any(|v| v.abs() < 1e-4)) {
                continue;
            }
            trunk.zero_grad();
            let dx = trunk.backward(&caches, &proj);
            assert!(rel_error(&dx, &numeric_grad(&x, |xp| loss(&trunk, xp))) < 1e-4);
            let w0 = trunk.blocks[0].dense.w.value.clone();
            let nw = numeric_grad(&w0, |wv| {
                let mut t = trunk.clone();
                t.blocks[0].dense.w.value = wv.clone();
                loss(&t, &x)
            });
            assert!(rel_error(&trunk.blocks[0].dense.w.grad, &nw) < 1e-4);
        }
    }

    #[test]
    fn dropout_block_gradient_uses_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut block = Block::new("b", 3, 6, 0.3, true, &mut rng);
        let x = random(4, 3, &mut rng);
        let proj = random(4, 6, &mut rng);
        let (_, cache) = block.forward(&x, true, &mut ChaCha8Rng::seed_from_u64(99));
        block.zero_grad();
        let dx = block.backward(&cache, &proj);
        // same seed reproduces the same mask
        let nx = numeric_grad(&x, |xp| (block.forward(xp, true, &mut ChaCha8Rng::seed_from_u64(99)).0 * &proj).sum());
        assert!(rel_error(&dx, &nx) < 1e-4);
    }

    #[test]
    fn critic_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for rep in 0..20 {
            let (b, zd, ad) = (1 + rep % 3, 2 + rep % 3, 1 + rep % 2);
            let mut critic = Critic::new("c", zd, ad, 5, 2, 3, 0.0, true, &mut rng);
            let z = random(b, zd, &mut rng);
            let a = random(b, ad, &mut rng);
            let proj = random(b, 3, &mut rng);
            let mut r0 = ChaCha8Rng::seed_from_u64(0);
            let loss = |c: &Critic, z: &Matrix, a: &Matrix| (c.forward(z, a, false, &mut ChaCha8Rng::seed_from_u64(0)).0 * &proj).sum();
            let (_, cache) = critic.forward(&z, &a, false, &mut r0);
            critic.zero_grad();
            let (dz, da) = critic.backward(&cache, &proj);
            assert!(rel_error(&dz, &numeric_grad(&z, |zp| loss(&critic, zp, &a))) < 1e-4);
            assert!(rel_error(&da, &numeric_grad(&a, |ap| loss(&critic, &z, ap))) < 1e-4);
            let nw = numeric_grad(&critic.out.w.value, |wv| {
                let mut c = critic.clone();
                c.out.w.value = wv.clone();
                loss(&c, &z, &a)
            });
            assert!(rel_error(&critic.out.w.grad, &nw) < 1e-4);
        }
    }

    #[test]
    fn initial_actions_are_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let actor = Actor::new(10, 16, 2, 8, 0.0, true, &mut rng);
        let z = random(5, 10, &mut rng);
        let (mu, _, _) = actor.forward(&z, false, &mut rng);
        assert!(mu.iter().all(|v| v.abs() < 0.1));
    }
}
