//! Distributional actor-critic agent with a recurrent feature extractor.
//!
//! The extractor runs an LSTM over the 8-channel observation window and
//! concatenates its last hidden state with the stationary features into the
//! latent `z`. The actor maps `z` to a squashed Gaussian over `(-1, 1)^8`;
//! an ensemble of quantile critics scores `(z, a)`. Critic targets pool the
//! next-state quantiles of all target critics and drop the largest ones.

mod nets;
mod replay;
mod tqc;

pub mod bandit;

pub use nets::{
    log_squash_jacobian, squash_backward, squash_sample, standard_normal, Actor, ActorCache, Block, BlockCache, Critic,
    CriticCache, PolicySample, Trunk,
    LOG_STD_MAX, LOG_STD_MIN,
};
pub use replay::{share_obs, ReplayBuffer, SharedObs, Transition};
pub use tqc::{quantile_fractions, quantile_huber_loss, quantile_targets};

use std::fmt;
use std::str::FromStr;

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::env::ACTION_DIM;
use crate::error::{Error, Result};
use crate::nn::{export_params, hcat, import_params, polyak_update, Adam, AdamState, Lstm, LstmCache, Matrix, Module, NamedArray, Param};
use crate::seeds::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub discount: f64,
    /// Polyak coefficient for target networks.
    pub target_smoothing: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Critic updates per environment step.
    pub gradient_steps: usize,
    pub actor_updates_per_step: usize,
    pub replay_capacity: usize,
    /// Transitions collected with uniform random actions before updates start.
    pub warmup: usize,
    pub entropy_target: f64,
    pub init_temperature: f64,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub num_q_networks: usize,
    pub quantiles_per_net: usize,
    pub top_quantiles_to_drop_per_net: usize,
    pub actor_blocks: usize,
    pub critic_blocks: usize,
    pub hidden_units: usize,
    pub dropout_rate_actor: f64,
    pub dropout_rate_critic: f64,
    pub actor_layer_norm: bool,
    pub critic_layer_norm: bool,
    pub activation: Activation,
    /// Stop actor-loss gradients at the latent.
    pub freeze_extractor_for_actor: bool,
    pub huber_threshold: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            discount: 0.90,
            target_smoothing: 5e-3,
            learning_rate: 3e-4,
            batch_size: 128,
            gradient_steps: 4,
            actor_updates_per_step: 1,
            replay_capacity: 200_000,
            warmup: 1000,
            entropy_target: -(ACTION_DIM as f64),
            init_temperature: 1.0,
            lstm_layers: 2,
            lstm_hidden: 256,
            num_q_networks: 2,
            quantiles_per_net: 25,
            top_quantiles_to_drop_per_net: 2,
            actor_blocks: 2,
            critic_blocks: 2,
            hidden_units: 256,
            dropout_rate_actor: 0.03,
            dropout_rate_critic: 0.03,
            actor_layer_norm: true,
            critic_layer_norm: true,
            activation: Activation::Relu,
            freeze_extractor_for_actor: false,
            huber_threshold: 1.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("agent.{key}"), msg))
            }
        };
        check((0.0..=1.0).contains(&self.discount), "discount", "must lie in [0, 1]")?;
        check(
            self.target_smoothing > 0.0 && self.target_smoothing < 1.0,
            "target_smoothing",
            "must lie in (0, 1)",
        )?;
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate",
            "must be > 0",
        )?;
        check(self.batch_size >= 1, "batch_size", "must be >= 1")?;
        check(self.gradient_steps >= 1, "gradient_steps", "must be >= 1")?;
        check(self.replay_capacity >= self.batch_size, "replay_capacity", "must be >= batch_size")?;
        check(self.entropy_target.is_finite(), "entropy_target", "must be finite")?;
        check(self.init_temperature > 0.0, "init_temperature", "must be > 0")?;
        check(self.lstm_layers >= 1, "lstm_layers", "must be >= 1")?;
        check(self.lstm_hidden >= 1, "lstm_hidden", "must be >= 1")?;
        check(self.num_q_networks >= 1, "num_q_networks", "must be >= 1")?;
        check(self.quantiles_per_net >= 1, "quantiles_per_net", "must be >= 1")?;
        check(
            self.top_quantiles_to_drop_per_net < self.quantiles_per_net,
            "top_quantiles_to_drop_per_net",
            "must be < quantiles_per_net",
        )?;
        check(self.hidden_units >= 1, "hidden_units", "must be >= 1")?;
        check(
            (0.0..1.0).contains(&self.dropout_rate_actor),
            "dropout_rate_actor",
            "must lie in [0, 1)",
        )?;
        check(
            (0.0..1.0).contains(&self.dropout_rate_critic),
            "dropout_rate_critic",
            "must lie in [0, 1)",
        )?;
        check(self.huber_threshold > 0.0, "huber_threshold", "must be > 0")?;
        Ok(())
    }

    /// Number of pooled quantiles kept after truncation.
    pub fn kept_quantiles(&self) -> usize {
        self.num_q_networks * (self.quantiles_per_net - self.top_quantiles_to_drop_per_net)
    }
}

/// Named agent presets compared in ablations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Dropout and layer norm on actor and critics.
    React,
    /// Regularized critics, plain actor.
    Droq,
    /// No dropout, no layer norm.
    Tqc,
    /// `React` with the given actor dropout rate.
    ActorDropout(f64),
}

impl Variant {
    pub fn apply(&self, base: &AgentConfig) -> AgentConfig {
        let mut c = base.clone();
        let rate = if base.dropout_rate_critic > 0.0 {
            base.dropout_rate_critic
        } else {
            AgentConfig::default().dropout_rate_critic
        };
        match *self {
            Variant::React => {
                c.dropout_rate_actor = if base.dropout_rate_actor > 0.0 { base.dropout_rate_actor } else { rate };
                c.dropout_rate_critic = rate;
                c.actor_layer_norm = true;
                c.critic_layer_norm = true;
            }
            Variant::Droq => {
                c.dropout_rate_actor = 0.0;
                c.actor_layer_norm = false;
                c.dropout_rate_critic = rate;
                c.critic_layer_norm = true;
            }
            Variant::Tqc => {
                c.dropout_rate_actor = 0.0;
                c.dropout_rate_critic = 0.0;
                c.actor_layer_norm = false;
                c.critic_layer_norm = false;
            }
            Variant::ActorDropout(p) => {
                c = Variant::React.apply(base);
                c.dropout_rate_actor = p;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::React => write!(f, "react"),
            Variant::Droq => write!(f, "droq"),
            Variant::Tqc => write!(f, "tqc"),
            Variant::ActorDropout(p) => write!(f, "dropout={p}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "react" => Ok(Variant::React),
            "droq" | "droq-style" => Ok(Variant::Droq),
            "tqc" => Ok(Variant::Tqc),
            other => {
                let rate = other
                    .strip_prefix("dropout=")
                    .and_then(|r| r.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::invalid(format!("unknown variant `{s}` (expected react, droq, tqc or dropout=RATE)"))
                    })?;
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(Variant::ActorDropout(rate))
            }
        }
    }
}

/// Shape of the flattened observation: `window_len * 8` series values
/// followed by `stationary` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsSpec {
    pub window_len: usize,
    pub stationary: usize,
    pub channels: usize,
}

impl ObsSpec {
    pub fn new(window_len: usize, stationary: usize) -> Self {
        ObsSpec {
            window_len,
            stationary,
            channels: crate::env::NUM_CHANNELS,
        }
    }

    pub fn len(&self) -> usize {
        self.window_len * self.channels + self.stationary
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Packs observations into LSTM inputs and the stationary block.
    fn batch<O: AsRef<[f32]>>(&self, obs: &[O]) -> Result<(Vec<Matrix>, Matrix)> {
        let b = obs.len();
        let n = self.len();
        if let Some(o) = obs.iter().find(|o| o.as_ref().len() != n) {
            return Err(Error::invalid(format!(
                "observation has {} values, expected {n}",
                o.as_ref().len()
            )));
        }
        let c = self.channels;
        let seq = (0..self.window_len)
            .map(|t| Matrix::from_shape_fn((b, c), |(r, ch)| obs[r].as_ref()[t * c + ch] as f64))
            .collect();
        let off = self.window_len * c;
        let stat = Matrix::from_shape_fn((b, self.stationary), |(r, j)| obs[r].as_ref()[off + j] as f64);
        Ok((seq, stat))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub temperature: f64,
    pub entropy: f64,
    pub mean_kept_quantile: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub critic_updates: u64,
    pub actor_updates: u64,
    pub train_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRngs {
    pub dropout: StreamRng,
    pub replay: StreamRng,
    /// Reparameterization noise inside updates.
    pub noise: StreamRng,
}

impl AgentRngs {
    pub fn from_master(master: u64) -> Self {
        AgentRngs {
            dropout: seeds::stream(master, seeds::labels::DROPOUT),
            replay: seeds::stream(master, seeds::labels::REPLAY),
            noise: seeds::stream(master, seeds::labels::TARGET),
        }
    }
}

/// Serializable agent state for checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub obs_spec: ObsSpec,
    pub extractor: Vec<NamedArray>,
    pub actor: Vec<NamedArray>,
    pub critics: Vec<Vec<NamedArray>>,
    pub target_extractor: Vec<NamedArray>,
    pub target_critics: Vec<Vec<NamedArray>>,
    pub log_temperature: f64,
    pub critic_opt: AdamState,
    pub actor_opt: AdamState,
    pub temperature_opt: AdamState,
    pub rngs: AgentRngs,
    pub counters: Counters,
}

#[derive(Debug, Clone)]
pub struct Agent {
    cfg: AgentConfig,
    spec: ObsSpec,
    pub extractor: Lstm,
    pub actor: Actor,
    pub critics: Vec<Critic>,
    pub target_extractor: Lstm,
    pub target_critics: Vec<Critic>,
    log_alpha: Param,
    critic_opt: Adam,
    actor_opt: Adam,
    alpha_opt: Adam,
    rngs: AgentRngs,
    counters: Counters,
}

fn params_mut<'a>(extractor: &'a mut Lstm, nets: impl IntoIterator<Item = &'a mut dyn Module>) -> Vec<&'a mut Param> {
    let mut v = extractor.params_mut();
    for n in nets {
        v.extend(n.params_mut());
    }
    v
}

fn ensure_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Fault(format!("{what} is not finite ({v})")))
    }
}

/// Stand-in for passes where dropout is off and no randomness is drawn.
fn idle_rng() -> StreamRng {
    rand::SeedableRng::seed_from_u64(0)
}

fn encode(extractor: &Lstm, seq: &[Matrix], stat: &Matrix) -> (Matrix, LstmCache) {
    let (h, cache) = extractor.forward(seq);
    (hcat(&h, stat), cache)
}

impl Agent {
    pub fn new(cfg: AgentConfig, spec: ObsSpec, master_seed: u64) -> Result<Self> {
        cfg.validate()?;
        if spec.window_len == 0 {
            return Err(Error::invalid("observation window must be nonempty"));
        }
        let mut rng = seeds::stream(master_seed, seeds::labels::INIT);
        let extractor = Lstm::new("extractor", spec.channels, cfg.lstm_hidden, cfg.lstm_layers, &mut rng);
        let z_dim = cfg.lstm_hidden + spec.stationary;
        let actor = Actor::new(
            z_dim,
            cfg.hidden_units,
            cfg.actor_blocks,
            ACTION_DIM,
            cfg.dropout_rate_actor,
            cfg.actor_layer_norm,
            &mut rng,
        );
        let critics: Vec<Critic> = (0..cfg.num_q_networks)
            .map(|i| {
                Critic::new(
                    &format!("critic{i}"),
                    z_dim,
                    ACTION_DIM,
                    cfg.hidden_units,
                    cfg.critic_blocks,
                    cfg.quantiles_per_net,
                    cfg.dropout_rate_critic,
                    cfg.critic_layer_norm,
                    &mut rng,
                )
            })
            .collect();
        let log_alpha = Param::new("log_temperature", Matrix::from_elem((1, 1), cfg.init_temperature.ln()));
        Ok(Agent {
            target_extractor: extractor.clone(),
            target_critics: critics.clone(),
            extractor,
            actor,
            critics,
            log_alpha,
            critic_opt: Adam::new(cfg.learning_rate),
            actor_opt: Adam::new(cfg.learning_rate),
            alpha_opt: Adam::new(cfg.learning_rate),
            rngs: AgentRngs::from_master(master_seed),
            counters: Counters::default(),
            spec,
            cfg,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn obs_spec(&self) -> ObsSpec {
        self.spec
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn temperature(&self) -> f64 {
        self.log_alpha.value[[0, 0]].exp()
    }

    pub fn rngs_mut(&mut self) -> &mut AgentRngs {
        &mut self.rngs
    }

    /// Transitions needed before the first update.
    pub fn ready_at(&self) -> usize {
        self.cfg.warmup.max(self.cfg.batch_size)
    }

    /// Selects an action for one observation. Dropout is off.
    pub fn act<R: rand::Rng + ?Sized>(&self, obs: &[f64], mode: ActMode, rng: &mut R) -> Result<[f64; ACTION_DIM]> {
        let obs32: Vec<f32> = obs.iter().map(|&v| v as f32).collect();
        let (seq, stat) = self.spec.batch(&[obs32])?;
        let z = encode(&self.extractor, &seq, &stat).0;
        // dropout is disabled, the rng is never consumed
        let (mu, ls, _) = self.actor.forward(&z, false, &mut idle_rng());
        let a = match mode {
            ActMode::Deterministic => mu.mapv(f64::tanh),
            ActMode::Stochastic => squash_sample(&mu, &ls, standard_normal(1, ACTION_DIM, rng)).action,
        };
        let mut out = [0.0; ACTION_DIM];
        let lim = 1.0 - f64::EPSILON;
        for (o, &v) in out.iter_mut().zip(a.iter()) {
            if !v.is_finite() {
                return Err(Error::Fault(format!(
                    "policy produced non-finite action; mean {:?}, log-std {:?}, latent norm {}",
                    mu.as_slice(),
                    ls.as_slice(),
                    z.mapv(|x| x * x).sum().sqrt()
                )));
            }
            *o = v.clamp(-lim, lim);
        }
        Ok(out)
    }

    /// One environment step worth of updates. Returns `None` while the
    /// buffer holds fewer than [`Agent::ready_at`] transitions.
    pub fn train_step(&mut self, buffer: &ReplayBuffer) -> Result<Option<TrainStats>> {
        if buffer.len() < self.ready_at() {
            return Ok(None);
        }
        let mut critic_loss = 0.0;
        let mut kept_mean = 0.0;
        let mut last_batch = Vec::new();
        for _ in 0..self.cfg.gradient_steps {
            let batch: Vec<Transition> = buffer
                .sample(self.cfg.batch_size, &mut self.rngs.replay)?
                .into_iter()
                .cloned()
                .collect();
            let (l, k) = self.critic_update(&batch)?;
            critic_loss += l;
            kept_mean += k;
            last_batch = batch;
        }
        critic_loss /= self.cfg.gradient_steps as f64;
        kept_mean /= self.cfg.gradient_steps as f64;

        let mut actor_loss = f64::NAN;
        let mut entropy = f64::NAN;
        for i in 0..self.cfg.actor_updates_per_step {
            let batch: Vec<Transition> = if i == 0 {
                std::mem::take(&mut last_batch)
            } else {
                buffer
                    .sample(self.cfg.batch_size, &mut self.rngs.replay)?
                    .into_iter()
                    .cloned()
                    .collect()
            };
            let (l, h) = self.actor_update(&batch)?;
            actor_loss = l;
            entropy = h;
        }
        self.counters.train_calls += 1;
        Ok(Some(TrainStats {
            critic_loss,
            actor_loss,
            temperature: self.temperature(),
            entropy,
            mean_kept_quantile: kept_mean,
        }))
    }

    /// Truncated quantile targets for a batch, computed without dropout.
    pub fn batch_targets(&mut self, batch: &[Transition]) -> Result<Matrix> {
        let next: Vec<&[f32]> = batch.iter().map(|t| &*t.next_obs).collect();
        let (nseq, nstat) = self.spec.batch(&next)?;
        let z_next = encode(&self.target_extractor, &nseq, &nstat).0;
        let mut off = idle_rng();
        let (mu, ls, _) = self.actor.forward(&z_next, false, &mut off);
        let eps = standard_normal(batch.len(), ACTION_DIM, &mut self.rngs.noise);
        let s = squash_sample(&mu, &ls, eps);
        let next_q: Vec<Matrix> = self
            .target_critics
            .iter()
            .map(|c| c.forward(&z_next, &s.action, false, &mut off).0)
            .collect();
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        let dones: Vec<bool> = batch.iter().map(|t| t.done).collect();
        Ok(quantile_targets(
            &next_q,
            &rewards,
            &dones,
            s.log_prob.as_slice().expect("contiguous"),
            self.temperature(),
            self.cfg.discount,
            self.cfg.num_q_networks * self.cfg.top_quantiles_to_drop_per_net,
        ))
    }

    fn actions(batch: &[Transition]) -> Matrix {
        Matrix::from_shape_fn((batch.len(), ACTION_DIM), |(r, c)| batch[r].action[c])
    }

    fn critic_update(&mut self, batch: &[Transition]) -> Result<(f64, f64)> {
        let targets = self.batch_targets(batch)?;
        let obs: Vec<&[f32]> = batch.iter().map(|t| &*t.obs).collect();
        let (seq, stat) = self.spec.batch(&obs)?;
        let actions = Self::actions(batch);
        let (z, cache) = encode(&self.extractor, &seq, &stat);

        self.extractor.zero_grad();
        for c in &mut self.critics {
            c.zero_grad();
        }
        let n = self.critics.len() as f64;
        let mut loss = 0.0;
        let mut dz = Matrix::zeros(z.raw_dim());
        for c in &mut self.critics {
            let (q, cc) = c.forward(&z, &actions, true, &mut self.rngs.dropout);
            let (l, g) = quantile_huber_loss(&q, &targets, self.cfg.huber_threshold);
            loss += l / n;
            let (dzi, _) = c.backward(&cc, &(g / n));
            dz += &dzi;
        }
        ensure_finite("critic loss", loss)?;
        let h = self.extractor.hidden();
        self.extractor.backward(&cache, &dz.slice(s![.., ..h]).to_owned());

        let group = params_mut(
            &mut self.extractor,
            self.critics.iter_mut().map(|c| c as &mut dyn Module),
        );
        self.critic_opt.step(group);
        self.counters.critic_updates += 1;

        let rho = self.cfg.target_smoothing;
        polyak_update(&mut self.target_extractor, &self.extractor, rho)?;
        for (t, o) in self.target_critics.iter_mut().zip(&self.critics) {
            polyak_update(t, o, rho)?;
        }
        Ok((loss, targets.mean().unwrap_or(0.0)))
    }

    fn actor_update(&mut self, batch: &[Transition]) -> Result<(f64, f64)> {
        let obs: Vec<&[f32]> = batch.iter().map(|t| &*t.obs).collect();
        let (seq, stat) = self.spec.batch(&obs)?;
        let (z, cache) = encode(&self.extractor, &seq, &stat);
        let b = batch.len() as f64;
        let alpha = self.temperature();

        self.actor.zero_grad();
        self.extractor.zero_grad();
        let (mu, ls, acache) = self.actor.forward(&z, true, &mut self.rngs.dropout);
        let eps = standard_normal(batch.len(), ACTION_DIM, &mut self.rngs.noise);
        let sample = squash_sample(&mu, &ls, eps);

        // critic scores of the sampled actions; the latent is held fixed
        let per_q = 1.0 / (b * (self.critics.len() * self.cfg.quantiles_per_net) as f64);
        let mut q_mean = 0.0;
        let mut d_action = Matrix::zeros(sample.action.raw_dim());
        for c in &mut self.critics {
            let (q, cc) = c.forward(&z, &sample.action, true, &mut self.rngs.dropout);
            q_mean += q.sum() * per_q;
            let dq = Matrix::from_elem(q.raw_dim(), -per_q);
            let (_, da) = c.backward(&cc, &dq);
            d_action += &da;
        }
        let logp = &sample.log_prob;
        let mean_logp = logp.mean().unwrap_or(0.0);
        let loss = alpha * mean_logp - q_mean;
        ensure_finite("actor loss", loss)?;

        let d_logp = Matrix::from_elem(logp.raw_dim(), alpha / b);
        let (d_mu, d_ls) = squash_backward(&sample, &d_action, &d_logp);
        let dz = self.actor.backward(&acache, &d_mu, &d_ls);
        if self.cfg.freeze_extractor_for_actor {
            self.actor_opt.step(self.actor.params_mut());
        } else {
            let h = self.extractor.hidden();
            self.extractor.backward(&cache, &dz.slice(s![.., ..h]).to_owned());
            let group = params_mut(&mut self.extractor, [&mut self.actor as &mut dyn Module]);
            self.actor_opt.step(group);
        }

        // temperature: minimize -log_alpha * (logp + target)
        self.log_alpha.grad[[0, 0]] = -(mean_logp + self.cfg.entropy_target);
        self.alpha_opt.step(vec![&mut self.log_alpha]);
        ensure_finite("temperature", self.temperature())?;
        self.counters.actor_updates += 1;
        Ok((loss, -mean_logp))
    }

    pub fn state(&self) -> AgentState {
        AgentState {
            obs_spec: self.spec,
            extractor: export_params(&self.extractor),
            actor: export_params(&self.actor),
            critics: self.critics.iter().map(|c| export_params(c)).collect(),
            target_extractor: export_params(&self.target_extractor),
            target_critics: self.target_critics.iter().map(|c| export_params(c)).collect(),
            log_temperature: self.log_alpha.value[[0, 0]],
            critic_opt: self.critic_opt.state(),
            actor_opt: self.actor_opt.state(),
            temperature_opt: self.alpha_opt.state(),
            rngs: self.rngs.clone(),
            counters: self.counters,
        }
    }

    pub fn from_state(cfg: AgentConfig, state: &AgentState) -> Result<Self> {
        let mut a = Agent::new(cfg, state.obs_spec, 0)?;
        import_params(&mut a.extractor, &state.extractor)?;
        import_params(&mut a.actor, &state.actor)?;
        import_params(&mut a.target_extractor, &state.target_extractor)?;
        if state.critics.len() != a.critics.len() || state.target_critics.len() != a.critics.len() {
            return Err(Error::Fault("critic ensemble size differs from config".into()));
        }
        for (c, s) in a.critics.iter_mut().zip(&state.critics) {
            import_params(c, s)?;
        }
        for (c, s) in a.target_critics.iter_mut().zip(&state.target_critics) {
            import_params(c, s)?;
        }
        a.log_alpha.value[[0, 0]] = state.log_temperature;
        a.critic_opt.load_state(&state.critic_opt)?;
        a.actor_opt.load_state(&state.actor_opt)?;
        a.alpha_opt.load_state(&state.temperature_opt)?;
        a.rngs = state.rngs.clone();
        a.counters = state.counters;
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{numeric_grad, rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> AgentConfig {
        AgentConfig {
            batch_size: 8,
            gradient_steps: 4,
            warmup: 16,
            replay_capacity: 100,
            lstm_layers: 1,
            lstm_hidden: 4,
            hidden_units: 8,
            quantiles_per_net: 5,
            top_quantiles_to_drop_per_net: 1,
            ..AgentConfig::default()
        }
    }

    fn fill(buffer: &mut ReplayBuffer, spec: ObsSpec, n: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n {
            let o: Vec<f64> = (0..spec.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let o2: Vec<f64> = (0..spec.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut a = [0.0; ACTION_DIM];
            a.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            buffer.push(Transition {
                obs: share_obs(&o),
                action: a,
                reward: rng.random_range(-1.0..0.0),
                next_obs: share_obs(&o2),
                done: rng.random_bool(0.1),
            });
        }
    }

    #[test]
    fn defaults_and_truncation() {
        let c = AgentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.kept_quantiles(), 46);
        assert_eq!(c.entropy_target, -8.0);
        let bad = AgentConfig {
            discount: 1.5,
            ..c.clone()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "agent.discount"));
        let bad = AgentConfig {
            top_quantiles_to_drop_per_net: 25,
            ..c
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn variants_parse_and_apply() {
        let base = AgentConfig::default();
        let tqc = "tqc".parse::<Variant>().unwrap().apply(&base);
        assert_eq!((tqc.dropout_rate_actor, tqc.dropout_rate_critic), (0.0, 0.0));
        assert!(!tqc.actor_layer_norm && !tqc.critic_layer_norm);
        let droq = "droq-style".parse::<Variant>().unwrap().apply(&base);
        assert_eq!((droq.dropout_rate_actor, droq.dropout_rate_critic), (0.0, 0.03));
        assert!(!droq.actor_layer_norm && droq.critic_layer_norm);
        assert_eq!("react".parse::<Variant>().unwrap().apply(&base), base);
        let sweep = "dropout=0.05".parse::<Variant>().unwrap();
        assert_eq!(sweep.to_string(), "dropout=0.05");
        assert_eq!(sweep.apply(&base).dropout_rate_actor, 0.05);
        assert!("bogus".parse::<Variant>().is_err());
        assert!("dropout=1.5".parse::<Variant>().is_err());
    }

    #[test]
    fn act_modes() {
        let spec = ObsSpec::new(3, 1);
        let mut agent = Agent::new(tiny(), spec, 1).unwrap();
        let obs = vec![0.2; spec.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in agent.actor.mu.params_mut() {
            p.value.fill(0.0);
        }
        assert_eq!(agent.act(&obs, ActMode::Deterministic, &mut rng).unwrap(), [0.0; ACTION_DIM]);
        let a1 = agent.act(&obs, ActMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let a2 = agent.act(&obs, ActMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a1, a2);
        // wide policy: saturates tanh but stays open
        agent.actor.log_std.b.value.fill(2.0);
        agent.actor.log_std.w.value.fill(0.0);
        for _ in 0..10_000 {
            let a = agent.act(&obs, ActMode::Stochastic, &mut rng).unwrap();
            assert!(a.iter().all(|v| v.abs() < 1.0));
        }
        assert!(agent.act(&[0.0; 3], ActMode::Deterministic, &mut rng).is_err());
    }

    #[test]
    fn warmup_gate_leaves_parameters() {
        let spec = ObsSpec::new(3, 0);
        let mut agent = Agent::new(tiny(), spec, 2).unwrap();
        let before = agent.state();
        let mut buf = ReplayBuffer::new(100).unwrap();
        fill(&mut buf, spec, 15, 0);
        assert!(agent.train_step(&buf).unwrap().is_none());
        assert_eq!(agent.state(), before);
    }

    #[test]
    fn update_counts() {
        let spec = ObsSpec::new(3, 0);
        let mut agent = Agent::new(tiny(), spec, 3).unwrap();
        let mut buf = ReplayBuffer::new(100).unwrap();
        fill(&mut buf, spec, 20, 1);
        let stats = agent.train_step(&buf).unwrap().unwrap();
        assert_eq!(agent.counters().critic_updates, 4);
        assert_eq!(agent.counters().actor_updates, 1);
        assert!(stats.critic_loss.is_finite() && stats.actor_loss.is_finite());
        agent.train_step(&buf).unwrap();
        assert_eq!(agent.counters().critic_updates, 8);
    }

    #[test]
    fn zero_dropout_train_pass_equals_eval_pass() {
        let cfg = AgentConfig {
            dropout_rate_actor: 0.0,
            dropout_rate_critic: 0.0,
            ..tiny()
        };
        let spec = ObsSpec::new(3, 0);
        let agent = Agent::new(cfg, spec, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Matrix::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
        let a = Matrix::from_shape_fn((4, ACTION_DIM), |_| rng.random_range(-1.0..1.0));
        let (m1, s1, _) = agent.actor.forward(&z, true, &mut rng);
        let (m2, s2, _) = agent.actor.forward(&z, false, &mut rng);
        assert_eq!((m1, s1), (m2, s2));
        let q1 = agent.critics[0].forward(&z, &a, true, &mut rng).0;
        let q2 = agent.critics[0].forward(&z, &a, false, &mut rng).0;
        assert_eq!(q1, q2);
    }

    #[test]
    fn tqc_variant_is_flags_only() {
        // the plain variant builds the same parameter set minus layer norms
        let spec = ObsSpec::new(2, 0);
        let tqc = Agent::new(Variant::Tqc.apply(&tiny()), spec, 5).unwrap();
        assert!(tqc.actor.trunk.blocks.iter().all(|b| b.ln.is_none() && b.dropout == 0.0));
        assert!(tqc.critics.iter().all(|c| c.trunk.blocks.iter().all(|b| b.ln.is_none())));
        let react = Agent::new(tiny(), spec, 5).unwrap();
        assert!(react.actor.trunk.blocks.iter().all(|b| b.ln.is_some() && b.dropout > 0.0));
    }

    #[test]
    fn state_round_trip_resumes_bitwise() {
        let spec = ObsSpec::new(3, 1);
        let mut a = Agent::new(tiny(), spec, 6).unwrap();
        let mut buf = ReplayBuffer::new(100).unwrap();
        fill(&mut buf, spec, 30, 2);
        a.train_step(&buf).unwrap();
        let json = serde_json::to_string(&a.state()).unwrap();
        let mut b = Agent::from_state(tiny(), &serde_json::from_str(&json).unwrap()).unwrap();
        for _ in 0..3 {
            let sa = a.train_step(&buf).unwrap();
            let sb = b.train_step(&buf).unwrap();
            assert_eq!(sa, sb);
        }
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn temperature_moves_toward_target() {
        // a wide policy has entropy above a very low target; temperature falls
        let cfg = AgentConfig {
            entropy_target: -50.0,
            ..tiny()
        };
        let spec = ObsSpec::new(2, 0);
        let mut agent = Agent::new(cfg, spec, 7).unwrap();
        let mut buf = ReplayBuffer::new(100).unwrap();
        fill(&mut buf, spec, 20, 3);
        let t0 = agent.temperature();
        agent.train_step(&buf).unwrap();
        assert!(agent.temperature() < t0);

        let cfg = AgentConfig {
            entropy_target: 50.0,
            ..tiny()
        };
        let mut agent = Agent::new(cfg, spec, 7).unwrap();
        agent.train_step(&buf).unwrap();
        assert!(agent.temperature() > t0);
    }

    /// Actor objective on a fixed latent with frozen critics, as a function
    /// of the actor parameters.
    fn actor_objective(actor: &Actor, critics: &[Critic], z: &Matrix, eps: &Matrix, alpha: f64) -> f64 {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (mu, ls, _) = actor.forward(z, false, &mut r);
        let s = squash_sample(&mu, &ls, eps.clone());
        let b = z.nrows() as f64;
        let m = critics.iter().map(|c| c.out.out_dim()).sum::<usize>() as f64;
        let q: f64 = critics.iter().map(|c| c.forward(z, &s.action, false, &mut r).0.sum()).sum();
        alpha * s.log_prob.mean().unwrap() - q / (b * m)
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let mut actor = Actor::new(3, 2, 1, ACTION_DIM, 0.0, false, &mut rng);
            for p in actor.mu.params_mut().into_iter().chain(actor.log_std.params_mut()) {
                p.value.mapv_inplace(|v| v * 20.0);
            }
            let mut critics: Vec<Critic> = (0..2)
                .map(|i| Critic::new(&format!("c{i}"), 3, ACTION_DIM, 4, 1, 3, 0.0, false, &mut rng))
                .collect();
            let z = Matrix::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
            let eps = standard_normal(4, ACTION_DIM, &mut rng);
            let alpha = 0.7;
            let b = 4.0;
            let per_q = 1.0 / (b * 6.0);

            let (mu, ls, cache) = actor.forward(&z, false, &mut rng);
            let s = squash_sample(&mu, &ls, eps.clone());
            let mut d_action = Matrix::zeros(s.action.raw_dim());
            for c in &mut critics {
                let (q, cc) = c.forward(&z, &s.action, false, &mut rng);
                d_action += &c.backward(&cc, &Matrix::from_elem(q.raw_dim(), -per_q)).1;
            }
            let (dm, dl) = squash_backward(&s, &d_action, &Matrix::from_elem((4, 1), alpha / b));
            actor.zero_grad();
            let dz = actor.backward(&cache, &dm, &dl);

            let nz = numeric_grad(&z, |zp| {
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let (mu, ls, _) = actor.forward(zp, false, &mut r);
                let s = squash_sample(&mu, &ls, eps.clone());
                // the critics see the original latent
                let q: f64 = critics.iter().map(|c| c.forward(&z, &s.action, false, &mut r).0.sum()).sum();
                alpha * s.log_prob.mean().unwrap() - q * per_q
            });
            assert!(rel_error(&dz, &nz) < 1e-4);
            let w = actor.trunk.blocks[0].dense.w.value.clone();
            let nw = numeric_grad(&w, |wv| {
                let mut a = actor.clone();
                a.trunk.blocks[0].dense.w.value = wv.clone();
                actor_objective(&a, &critics, &z, &eps, alpha)
            });
            assert!(rel_error(&actor.trunk.blocks[0].dense.w.grad, &nw) < 1e-4);
            let nb = numeric_grad(&actor.mu.b.value, |bv| {
                let mut a = actor.clone();
                a.mu.b.value = bv.clone();
                actor_objective(&a, &critics, &z, &eps, alpha)
            });
            assert!(rel_error(&actor.mu.b.grad, &nb) < 1e-4);
        }
    }

    #[test]
    fn constant_critics_leave_only_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut critic = Critic::new("c", 3, ACTION_DIM, 4, 1, 3, 0.0, false, &mut rng);
        for p in critic.params_mut() {
            p.value.fill(0.0);
        }
        critic.out.b.value.fill(2.5);
        let z = Matrix::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        let a = Matrix::from_shape_fn((2, ACTION_DIM), |_| rng.random_range(-1.0..1.0));
        let (q, cc) = critic.forward(&z, &a, false, &mut rng);
        let (_, da) = critic.backward(&cc, &Matrix::from_elem(q.raw_dim(), -1.0));
        assert!(da.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn polyak_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let online = Critic::new("c", 2, ACTION_DIM, 3, 1, 2, 0.0, false, &mut rng);
        let mut target = Critic::new("c", 2, ACTION_DIM, 3, 1, 2, 0.0, false, &mut rng);
        let orig = target.clone();
        polyak_update(&mut target, &online, 0.0).unwrap();
        assert_eq!(target, orig);
        polyak_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, online);
        let mut t = Param::new("p", Matrix::zeros((1, 1)));
        let o = Param::new("p", Matrix::ones((1, 1)));
        struct One<'a>(&'a mut Param);
        impl Module for One<'_> {
            fn params(&self) -> Vec<&Param> {
                vec![self.0]
            }
            fn params_mut(&mut self) -> Vec<&mut Param> {
                vec![self.0]
            }
        }
        let mut o2 = o.clone();
        polyak_update(&mut One(&mut t), &One(&mut o2), 5e-3).unwrap();
        assert!((t.value[[0, 0]] - 0.005).abs() < 1e-15);
        let wrong = Critic::new("c", 3, ACTION_DIM, 3, 1, 2, 0.0, false, &mut rng);
        assert!(polyak_update(&mut target, &wrong, 0.5).is_err());
    }
}
