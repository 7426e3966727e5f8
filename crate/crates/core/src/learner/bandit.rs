//! One-step bandit with reward `-mean |a_i|`, used as a learning smoke test.

use rand::Rng;

use super::{share_obs, ActMode, Agent, AgentConfig, ObsSpec, ReplayBuffer, Transition};
use crate::env::ACTION_DIM;
use crate::error::Result;
use crate::seeds;

pub fn reward(a: &[f64; ACTION_DIM]) -> f64 {
    -a.iter().map(|v| v.abs()).sum::<f64>() / ACTION_DIM as f64
}

/// Small network sizes that train the bandit in seconds.
pub fn smoke_config() -> AgentConfig {
    AgentConfig {
        batch_size: 32,
        gradient_steps: 1,
        warmup: 100,
        replay_capacity: 10_000,
        learning_rate: 1e-3,
        lstm_layers: 1,
        lstm_hidden: 4,
        hidden_units: 32,
        ..AgentConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditRun {
    /// Deterministic mean `|a|` before any update.
    pub initial: f64,
    /// `(train steps, deterministic mean |a|)` at every check.
    pub trace: Vec<(usize, f64)>,
}

impl BanditRun {
    /// First train-step count at which the deterministic mean `|a|` fell
    /// below `threshold`.
    pub fn reached(&self, threshold: f64) -> Option<usize> {
        self.trace.iter().find(|(_, m)| *m < threshold).map(|(s, _)| *s)
    }

    pub fn last(&self) -> f64 {
        self.trace.last().map_or(self.initial, |t| t.1)
    }
}

/// Trains on the bandit for `train_steps` updates. The policy mean starts
/// biased to `tanh(initial_bias)` on every component so the agent has to
/// move it. Stops early once the deterministic mean `|a|` is below
/// `stop_below`.
pub fn run(
    cfg: &AgentConfig,
    seed: u64,
    train_steps: usize,
    initial_bias: f64,
    check_every: usize,
    stop_below: f64,
) -> Result<BanditRun> {
    let spec = ObsSpec::new(2, 0);
    let mut agent = Agent::new(cfg.clone(), spec, seed)?;
    agent.actor.mu.b.value.fill(initial_bias);
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity)?;
    let mut policy_rng = seeds::stream(seed, seeds::labels::POLICY);
    let mut warmup_rng = seeds::stream(seed, seeds::labels::WARMUP);
    let obs = vec![0.0; spec.len()];
    let shared = share_obs(&obs);
    let probe = |agent: &Agent| -> Result<f64> {
        let mut unused = seeds::stream(0, "");
        let a = agent.act(&obs, ActMode::Deterministic, &mut unused)?;
        Ok(-reward(&a))
    };
    let initial = probe(&agent)?;
    let mut trace = Vec::new();
    let mut done_steps = 0;
    while done_steps < train_steps {
        let a = if buffer.len() < agent.ready_at() {
            let mut a = [0.0; ACTION_DIM];
            a.iter_mut().for_each(|v| *v = warmup_rng.random_range(-1.0..1.0));
            a
        } else {
            agent.act(&obs, ActMode::Stochastic, &mut policy_rng)?
        };
        buffer.push(Transition {
            obs: shared.clone(),
            action: a,
            reward: reward(&a),
            next_obs: shared.clone(),
            done: true,
        });
        if agent.train_step(&buffer)?.is_some() {
            done_steps += 1;
            if done_steps % check_every == 0 || done_steps == train_steps {
                let m = probe(&agent)?;
                trace.push((done_steps, m));
                if m < stop_below {
                    break;
                }
            }
        }
    }
    Ok(BanditRun { initial, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learns_to_stay_still() {
        let run = run(&smoke_config(), 1, 5000, 1.0, 100, 0.1).unwrap();
        assert!(run.initial > 0.7);
        assert!(run.reached(0.1).is_some(), "{:?}", run.trace);
    }
}
