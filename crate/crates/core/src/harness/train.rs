//! Training loop, periodic evaluation and checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::env::{Env, EnvRngs, EnvSetup, EnvSnapshot, Observation, ACTION_DIM};
use crate::error::{Error, Result};
use crate::learner::{share_obs, ActMode, Agent, AgentState, ObsSpec, ReplayBuffer, SharedObs, TrainStats, Transition};
use crate::seeds::{self, StreamRng};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "env_step,episode,critic_loss,actor_loss,temperature,entropy,eval_reward";
pub const EVAL_HEADER: &str = "env_step,mean_r_j,mean_reward,std_reward,rolling_reward";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPLAY_FILE: &str = "replay.bin";

pub fn flatten(obs: &Observation) -> Vec<f64> {
    let mut v = obs.series.clone();
    v.extend_from_slice(&obs.stationary);
    v
}

fn widen(obs: &[f32]) -> Vec<f64> {
    obs.iter().map(|&v| v as f64).collect()
}

/// Deterministic-evaluation result over a set of episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Mean `r_J` over all steps of all episodes.
    pub mean_r_j: f64,
    /// Mean over episodes of the per-step total reward.
    pub mean_reward: f64,
    /// Standard deviation of the per-episode mean total reward.
    pub std_reward: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub env_step: u64,
    pub summary: EvalSummary,
    pub rolling_reward: f64,
}

/// Runs `episodes` complete episodes on a fresh environment seeded from
/// `seed` with the given policy. Only completed episodes are counted.
pub fn evaluate_policy(
    setup: &EnvSetup,
    seed: u64,
    episodes: usize,
    mut policy: impl FnMut(&[f64]) -> Result<[f64; ACTION_DIM]>,
) -> Result<EvalSummary> {
    let mut env = Env::new(setup.clone(), EnvRngs::from_master(seed, seeds::labels::EVAL))?;
    let mut rj_sum = 0.0;
    let mut steps = 0usize;
    let mut per_episode = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = flatten(&env.reset()?);
        let mut total = 0.0;
        let mut n = 0usize;
        loop {
            // the policy sees the same f32 precision as replay
            let o = widen(&share_obs(&obs));
            let res = env.step(&policy(&o)?)?;
            rj_sum += res.info.r_j;
            total += res.reward;
            steps += 1;
            n += 1;
            if res.done {
                break;
            }
            obs = flatten(&res.obs);
        }
        per_episode.push(total / n as f64);
    }
    let mean = per_episode.iter().sum::<f64>() / episodes as f64;
    let var = per_episode.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / episodes as f64;
    Ok(EvalSummary {
        mean_r_j: rj_sum / steps as f64,
        mean_reward: mean,
        std_reward: var.sqrt(),
        episodes,
    })
}

pub fn evaluate_agent(agent: &Agent, setup: &EnvSetup, seed: u64, episodes: usize) -> Result<EvalSummary> {
    let mut unused = seeds::stream(seed, seeds::labels::EVAL);
    evaluate_policy(setup, seed, episodes, |o| agent.act(o, ActMode::Deterministic, &mut unused))
}

pub fn evaluate_baseline(setup: &EnvSetup, seed: u64, episodes: usize) -> Result<EvalSummary> {
    evaluate_policy(setup, seed, episodes, |_| Ok([0.0; ACTION_DIM]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub config: RunConfig,
    pub env_step: u64,
    pub agent: AgentState,
    pub env: EnvSnapshot,
    pub current_obs: Option<Vec<f32>>,
    pub policy_rng: StreamRng,
    pub warmup_rng: StreamRng,
    pub baseline: EvalSummary,
    pub evals: Vec<EvalRecord>,
    /// Replay file next to the checkpoint, if saved.
    pub replay: Option<String>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found,
                supported: CHECKPOINT_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn agent(&self) -> Result<Agent> {
        Agent::from_state(self.config.agent.clone(), &self.agent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub env_steps: u64,
    pub baseline: EvalSummary,
    pub final_eval: Option<EvalSummary>,
    /// Relative improvement of the final mean `r_J` over the baseline.
    pub r_j_improvement: Option<f64>,
}

pub struct Trainer {
    cfg: RunConfig,
    seed: u64,
    env: Env,
    agent: Agent,
    buffer: ReplayBuffer,
    policy_rng: StreamRng,
    warmup_rng: StreamRng,
    env_step: u64,
    current: Option<SharedObs>,
    baseline: EvalSummary,
    evals: Vec<EvalRecord>,
    pending_metrics: String,
    pending_steps: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Trainer {
    pub fn new(mut cfg: RunConfig, seed: u64) -> Result<Self> {
        cfg.run.seed = seed;
        cfg.validate()?;
        let setup = cfg.setup();
        let env = Env::from_seed(setup.clone(), seed)?;
        let spec = ObsSpec::new(cfg.env.window_len, cfg.env.stationary.len());
        let agent = Agent::new(cfg.agent.clone(), spec, seed)?;
        let buffer = ReplayBuffer::new(cfg.agent.replay_capacity)?;
        let baseline = evaluate_baseline(&setup, seed, cfg.run.eval_episodes)?;
        Ok(Trainer {
            env,
            agent,
            buffer,
            policy_rng: seeds::stream(seed, seeds::labels::POLICY),
            warmup_rng: seeds::stream(seed, seeds::labels::WARMUP),
            env_step: 0,
            current: None,
            baseline,
            evals: Vec::new(),
            pending_metrics: String::new(),
            pending_steps: String::new(),
            seed,
            cfg,
        })
    }

    /// Restores a trainer from a checkpoint and its replay file.
    pub fn resume(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.config.validate()?;
        let agent = ck.agent()?;
        let env = Env::restore(ck.config.setup(), ck.env.clone())?;
        let buffer = match &ck.replay {
            Some(name) => {
                let p = path.parent().unwrap_or(Path::new(".")).join(name);
                ReplayBuffer::read_from(std::io::BufReader::new(fs::File::open(&p)?))?
            }
            None => {
                return Err(Error::invalid("checkpoint was saved without a replay buffer and cannot resume training"))
            }
        };
        Ok(Trainer {
            env,
            agent,
            buffer,
            policy_rng: ck.policy_rng,
            warmup_rng: ck.warmup_rng,
            env_step: ck.env_step,
            current: ck.current_obs.map(SharedObs::from),
            baseline: ck.baseline,
            evals: ck.evals,
            pending_metrics: String::new(),
            pending_steps: String::new(),
            seed: ck.seed,
            cfg: ck.config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn env_step(&self) -> u64 {
        self.env_step
    }

    pub fn baseline(&self) -> EvalSummary {
        self.baseline
    }

    pub fn evals(&self) -> &[EvalRecord] {
        &self.evals
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            config: self.cfg.clone(),
            env_step: self.env_step,
            agent: self.agent.state(),
            env: self.env.snapshot(),
            current_obs: self.current.as_ref().map(|o| o.to_vec()),
            policy_rng: self.policy_rng.clone(),
            warmup_rng: self.warmup_rng.clone(),
            baseline: self.baseline,
            evals: self.evals.clone(),
            replay: self.cfg.run.save_replay.then(|| REPLAY_FILE.to_string()),
        }
    }

    /// One environment step plus the agent update that follows it.
    pub fn step(&mut self) -> Result<Option<TrainStats>> {
        let obs = match &self.current {
            Some(o) => o.clone(),
            None => share_obs(&flatten(&self.env.reset()?)),
        };
        let action = if self.buffer.len() < self.agent.ready_at() {
            let mut a = [0.0; ACTION_DIM];
            a.iter_mut().for_each(|v| *v = self.warmup_rng.random_range(-1.0..1.0));
            a
        } else {
            self.agent.act(&widen(&obs), ActMode::Stochastic, &mut self.policy_rng)?
        };
        let res = self.env.step(&action)?;
        if self.cfg.run.step_log {
            let st = self.env.state().expect("episode running");
            let ema = fmt_opt(self.env.ema());
            let r = res.info;
            self.pending_steps.push_str(&format!(
                "{},{},{},{},{},{},{ema}\n",
                self.env.episode(),
                st.k - 1,
                r.r_j,
                r.r_a,
                r.r_sc,
                r.total
            ));
        }
        let next = share_obs(&flatten(&res.obs));
        self.buffer.push(Transition {
            obs,
            action,
            reward: res.reward,
            next_obs: next.clone(),
            done: res.done,
        });
        self.current = if res.done { None } else { Some(next) };
        self.env_step += 1;
        self.agent.train_step(&self.buffer)
    }

    fn run_eval(&mut self) -> Result<EvalSummary> {
        let s = evaluate_agent(&self.agent, &self.cfg.setup(), self.seed, self.cfg.run.eval_episodes)?;
        let w = self.cfg.run.rolling_window;
        let recent: Vec<f64> = self
            .evals
            .iter()
            .rev()
            .take(w - 1)
            .map(|r| r.summary.mean_reward)
            .chain(std::iter::once(s.mean_reward))
            .collect();
        let rolling = recent.iter().sum::<f64>() / recent.len() as f64;
        self.evals.push(EvalRecord {
            env_step: self.env_step,
            summary: s,
            rolling_reward: rolling,
        });
        log::info!(
            "step {}: eval r_J {:.5} (baseline {:.5}), reward {:.4}",
            self.env_step,
            s.mean_r_j,
            self.baseline.mean_r_j,
            s.mean_reward
        );
        Ok(s)
    }

    /// Runs until the configured budget, writing all outputs under `out`.
    pub fn run(&mut self, out: &Path) -> Result<TrainSummary> {
        fs::create_dir_all(out)?;
        let metrics_path = out.join("metrics.csv");
        let steps_path = out.join("steps.csv");
        let eval_path = out.join("eval.csv");
        if self.env_step == 0 {
            self.cfg.echo(out)?;
            fs::write(&metrics_path, format!("{METRICS_HEADER}\n"))?;
            if self.cfg.run.step_log {
                fs::write(&steps_path, "episode,k,r_J,r_a,r_sc,r_total,ema\n")?;
            }
            self.save(out)?;
        } else {
            self.truncate_logs(&metrics_path, &steps_path)?;
        }

        let total = self.cfg.run.total_env_steps;
        let interval = self.cfg.run.eval_interval;
        while self.env_step < total {
            let stats = match self.step() {
                Ok(s) => s,
                Err(e) => return Err(self.fault(out, e)),
            };
            let eval_due = self.env_step % interval == 0 || self.env_step == total;
            let eval = if eval_due {
                match self.run_eval() {
                    Ok(s) => Some(s),
                    Err(e) => return Err(self.fault(out, e)),
                }
            } else {
                None
            };
            if stats.is_some() || eval.is_some() {
                let s = stats.unwrap_or(TrainStats {
                    critic_loss: f64::NAN,
                    actor_loss: f64::NAN,
                    temperature: self.agent.temperature(),
                    entropy: f64::NAN,
                    mean_kept_quantile: f64::NAN,
                });
                let num = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
                self.pending_metrics.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    self.env_step,
                    self.env.episode(),
                    num(s.critic_loss),
                    num(s.actor_loss),
                    num(s.temperature),
                    num(s.entropy),
                    fmt_opt(eval.map(|e| e.mean_reward))
                ));
            }
            if eval_due {
                self.flush_logs(&metrics_path, &steps_path)?;
                self.write_eval_csv(&eval_path)?;
                self.save(out)?;
            }
        }
        self.write_eval_csv(&eval_path)?;
        let summary = self.summary();
        fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        Ok(summary)
    }

    pub fn summary(&self) -> TrainSummary {
        let final_eval = self.evals.last().map(|r| r.summary);
        TrainSummary {
            seed: self.seed,
            env_steps: self.env_step,
            baseline: self.baseline,
            final_eval,
            r_j_improvement: final_eval.map(|f| (f.mean_r_j - self.baseline.mean_r_j) / self.baseline.mean_r_j.abs()),
        }
    }

    fn fault(&mut self, out: &Path, e: Error) -> Error {
        if matches!(e, Error::Fault(_)) {
            let path = out.join("fault_checkpoint.json");
            match serde_json::to_string(&self.checkpoint()) {
                Ok(s) => {
                    if fs::write(&path, s).is_ok() {
                        log::error!("numerical fault; state dumped to {}", path.display());
                    }
                }
                Err(err) => log::error!("could not dump fault checkpoint: {err}"),
            }
        }
        e
    }

    fn flush_logs(&mut self, metrics: &Path, steps: &Path) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(metrics)?;
        f.write_all(self.pending_metrics.as_bytes())?;
        self.pending_metrics.clear();
        if self.cfg.run.step_log {
            let mut f = OpenOptions::new().append(true).create(true).open(steps)?;
            f.write_all(self.pending_steps.as_bytes())?;
            self.pending_steps.clear();
        }
        Ok(())
    }

    /// Drops log rows written after the checkpoint being resumed.
    fn truncate_logs(&self, metrics: &Path, steps: &Path) -> Result<()> {
        if metrics.exists() {
            let text = fs::read_to_string(metrics)?;
            let mut kept = String::new();
            for (i, line) in text.lines().enumerate() {
                let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if i == 0 || step.is_some_and(|s| s <= self.env_step) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            fs::write(metrics, kept)?;
        } else {
            fs::write(metrics, format!("{METRICS_HEADER}\n"))?;
        }
        if self.cfg.run.step_log && !steps.exists() {
            fs::write(steps, "episode,k,r_J,r_a,r_sc,r_total,ema\n")?;
        }
        Ok(())
    }

    fn write_eval_csv(&self, path: &Path) -> Result<()> {
        let mut s = format!("{EVAL_HEADER}\n");
        for r in &self.evals {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.env_step, r.summary.mean_r_j, r.summary.mean_reward, r.summary.std_reward, r.rolling_reward
            ));
        }
        fs::write(path, s)?;
        Ok(())
    }

    fn save(&self, out: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.checkpoint())?;
        write_atomic(&out.join(CHECKPOINT_FILE), json.as_bytes())?;
        if self.cfg.run.save_replay {
            let mut bytes = Vec::new();
            self.buffer.write_to(&mut bytes)?;
            write_atomic(&out.join(REPLAY_FILE), &bytes)?;
        }
        Ok(())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Refuses to write into a directory holding a previous run unless
/// `overwrite` is set, in which case known output files are removed.
pub fn prepare_out_dir(out: &Path, overwrite: bool) -> Result<()> {
    const OUTPUTS: [&str; 9] = [
        "config.toml",
        "metrics.csv",
        "eval.csv",
        "steps.csv",
        CHECKPOINT_FILE,
        REPLAY_FILE,
        "summary.json",
        "fault_checkpoint.json",
        "checkpoint.tmp",
    ];
    let existing: Vec<PathBuf> = OUTPUTS.iter().map(|f| out.join(f)).filter(|p| p.exists()).collect();
    if existing.is_empty() {
        return Ok(());
    }
    if !overwrite {
        return Err(Error::invalid(format!(
            "output directory {} already holds a run; pass --overwrite to replace it",
            out.display()
        )));
    }
    for p in existing {
        fs::remove_file(p)?;
    }
    Ok(())
}

/// Trains one seed from scratch into `out`.
pub fn train(cfg: RunConfig, seed: u64, out: &Path, overwrite: bool) -> Result<TrainSummary> {
    prepare_out_dir(out, overwrite)?;
    let mut t = Trainer::new(cfg, seed)?;
    t.run(out)
}
