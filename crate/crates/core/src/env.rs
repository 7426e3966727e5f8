//! Step-decision environment for gain-schedule tuning.
//!
//! Every step applies an action to a 2 x 2 block of control points on each
//! gain surface, samples a fresh step reference and operating point,
//! simulates one closed-loop window and scores it. Episodes last exactly
//! `max_steps` steps and start from the baseline schedule.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bsg::{BsgGeometry, CpIndex};
use crate::control::{GainSchedule, PiState, ScheduleConfig};
use crate::error::{Error, Result};
use crate::plant::{measure, sample_theta, OperatingBox, PlantConfig, PlantState, ThetaMap};
use crate::seeds::{self, StreamRng};

pub const NUM_CHANNELS: usize = 8;
pub const ACTION_DIM: usize = 8;
pub const CHANNEL_NAMES: [&str; NUM_CHANNELS] = ["y_d", "y", "e", "kP", "kI", "u", "w1", "w2"];
/// Normalized channels are clipped to `[-OBS_CLIP, OBS_CLIP]`.
pub const OBS_CLIP: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceConfig {
    /// Level before the step.
    pub initial: [f64; 2],
    /// Level after the step.
    pub level: [f64; 2],
    /// Step time as a fraction of the window duration.
    pub step_time_frac: [f64; 2],
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            initial: [-1.0, 1.0],
            level: [-1.0, 1.0],
            step_time_frac: [0.0, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Error weight `Q`.
    pub q: f64,
    /// Control weight `R`.
    pub r: f64,
    /// Decision sample time in seconds.
    pub dt: f64,
    /// Samples per simulated window.
    pub window_len: usize,
    /// Steps per episode.
    pub max_steps: usize,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    /// Control-point change for a unit action component.
    pub delta_max: f64,
    pub ema_alpha: f64,
    pub operating_box: OperatingBox,
    pub reference: ReferenceConfig,
    /// Range used to normalize the control channel.
    pub u_range: [f64; 2],
    /// `r_J` assigned to a diverged window.
    pub r_j_floor: f64,
    /// `|x|` above this counts as divergence.
    pub divergence_bound: f64,
    /// Schedule gains and observe the undisturbed operating point.
    pub observe_true_w: bool,
    pub integral_clamp: Option<f64>,
    /// Stationary features appended to every observation.
    pub stationary: Vec<f64>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            q: 0.99,
            r: 0.01,
            dt: 0.05,
            window_len: 200,
            max_steps: 250,
            b1: 100.0,
            b2: 1.0,
            b3: 1.0,
            delta_max: 0.25,
            ema_alpha: 0.1,
            operating_box: OperatingBox::default(),
            reference: ReferenceConfig::default(),
            u_range: [-5.0, 5.0],
            r_j_floor: -1.0,
            divergence_bound: 1e6,
            observe_true_w: false,
            integral_clamp: None,
            stationary: Vec::new(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("env.{key}"), msg))
            }
        };
        check(self.q >= 0.0, "q", "must be >= 0")?;
        check(self.r >= 0.0, "r", "must be >= 0")?;
        check(self.dt > 0.0 && self.dt.is_finite(), "dt", "must be > 0")?;
        check(self.window_len >= 2, "window_len", "must be >= 2")?;
        check(self.max_steps >= 1, "max_steps", "must be >= 1")?;
        check(self.delta_max > 0.0, "delta_max", "must be > 0")?;
        check(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0, "ema_alpha", "must be in (0, 1]")?;
        for (key, b) in [("b1", self.b1), ("b2", self.b2), ("b3", self.b3)] {
            check(b >= 0.0 && b.is_finite(), key, "must be finite and >= 0")?;
        }
        check(self.r_j_floor <= 0.0, "r_j_floor", "must be <= 0")?;
        check(self.divergence_bound > 0.0, "divergence_bound", "must be > 0")?;
        check(self.u_range[1] > self.u_range[0], "u_range", "needs lo < hi")?;
        let bx = &self.operating_box;
        check(
            bx.lo.iter().zip(&bx.hi).all(|(l, h)| l.is_finite() && h.is_finite() && h > l),
            "operating_box",
            "needs finite lo < hi on both axes",
        )?;
        let rf = &self.reference;
        for (key, r) in [("initial", rf.initial), ("level", rf.level), ("step_time_frac", rf.step_time_frac)] {
            check(r[0] <= r[1] && r[0].is_finite() && r[1].is_finite(), &format!("reference.{key}"), "needs finite lo <= hi")?;
        }
        check(
            rf.step_time_frac[0] >= 0.0 && rf.step_time_frac[1] <= 1.0,
            "reference.step_time_frac",
            "must lie in [0, 1]",
        )?;
        if let Some(c) = self.integral_clamp {
            check(c > 0.0, "integral_clamp", "must be > 0")?;
        }
        Ok(())
    }

    pub fn window_duration(&self) -> f64 {
        self.window_len as f64 * self.dt
    }

    pub fn obs_len(&self) -> usize {
        self.window_len * NUM_CHANNELS + self.stationary.len()
    }
}

/// Per-channel affine normalization `(x - offset) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNorm {
    pub offset: [f64; NUM_CHANNELS],
    pub scale: [f64; NUM_CHANNELS],
}

impl ChannelNorm {
    /// Offsets at range midpoints, scales at half ranges.
    pub fn from_config(cfg: &EnvConfig, sched: &ScheduleConfig) -> Self {
        let rf = &cfg.reference;
        let y_lo = rf.initial[0].min(rf.level[0]);
        let y_hi = rf.initial[1].max(rf.level[1]);
        let mid_half = |lo: f64, hi: f64| {
            let half = 0.5 * (hi - lo);
            (0.5 * (lo + hi), if half > 0.0 { half } else { 1.0 })
        };
        let ranges = [
            (y_lo, y_hi),
            (y_lo, y_hi),
            (y_lo - y_hi, y_hi - y_lo),
            (sched.k_min, sched.k_max),
            (sched.k_min, sched.k_max),
            (cfg.u_range[0], cfg.u_range[1]),
            (cfg.operating_box.lo[0], cfg.operating_box.hi[0]),
            (cfg.operating_box.lo[1], cfg.operating_box.hi[1]),
        ];
        let mut offset = [0.0; NUM_CHANNELS];
        let mut scale = [1.0; NUM_CHANNELS];
        for (c, &(lo, hi)) in ranges.iter().enumerate() {
            (offset[c], scale[c]) = mid_half(lo, hi);
        }
        ChannelNorm { offset, scale }
    }

    pub fn normalize(&self, channel: usize, x: f64) -> f64 {
        ((x - self.offset[channel]) / self.scale[channel]).clamp(-OBS_CLIP, OBS_CLIP)
    }

    pub fn denormalize(&self, channel: usize, z: f64) -> f64 {
        z * self.scale[channel] + self.offset[channel]
    }
}

/// Normalized observation: `T` rows of 8 channels plus stationary features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub stationary: Vec<f64>,
    /// Time-major, `window_len * NUM_CHANNELS` values.
    pub series: Vec<f64>,
}

impl Observation {
    pub fn window_len(&self) -> usize {
        self.series.len() / NUM_CHANNELS
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.series.iter().skip(c).step_by(NUM_CHANNELS).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.series.len() + self.stationary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Raw closed-loop signals of one window.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SignalWindow {
    pub t: Vec<f64>,
    pub y_d: Vec<f64>,
    pub y: Vec<f64>,
    pub e: Vec<f64>,
    pub kp: Vec<f64>,
    pub ki: Vec<f64>,
    pub u: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    /// The loop left the finite range and the tail repeats the last good
    /// sample.
    pub diverged: bool,
}

impl SignalWindow {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        match c {
            0 => &self.y_d,
            1 => &self.y,
            2 => &self.e,
            3 => &self.kp,
            4 => &self.ki,
            5 => &self.u,
            6 => &self.w1,
            7 => &self.w2,
            _ => panic!("channel {c} out of range"),
        }
    }

    fn push(&mut self, row: [f64; 9]) {
        let [t, yd, y, e, kp, ki, u, w1, w2] = row;
        self.t.push(t);
        self.y_d.push(yd);
        self.y.push(y);
        self.e.push(e);
        self.kp.push(kp);
        self.ki.push(ki);
        self.u.push(u);
        self.w1.push(w1);
        self.w2.push(w2);
    }

    fn row(&self, k: usize) -> [f64; 9] {
        [
            self.t[k], self.y_d[k], self.y[k], self.e[k], self.kp[k], self.ki[k], self.u[k], self.w1[k], self.w2[k],
        ]
    }

    /// CSV with header `t,y_d,y,e,u,w1,w2,kP,kI`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,y_d,y,e,u,w1,w2,kP,kI\n");
        for k in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                self.t[k], self.y_d[k], self.y[k], self.e[k], self.u[k], self.w1[k], self.w2[k], self.kp[k], self.ki[k]
            );
        }
        out
    }
}

/// Step reference and operating point for one window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub initial: f64,
    pub level: f64,
    pub step_time: f64,
    /// Undisturbed operating point held over the window.
    pub w: [f64; 2],
}

impl Reference {
    pub fn y_d(&self, t: f64) -> f64 {
        if t < self.step_time {
            self.initial
        } else {
            self.level
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

pub fn sample_reference<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> Reference {
    let rf = &cfg.reference;
    let initial = uniform(rng, rf.initial);
    let level = uniform(rng, rf.level);
    let step_time = uniform(rng, rf.step_time_frac) * cfg.window_duration();
    let bx = &cfg.operating_box;
    let w = [uniform(rng, [bx.lo[0], bx.hi[0]]), uniform(rng, [bx.lo[1], bx.hi[1]])];
    Reference {
        initial,
        level,
        step_time,
        w,
    }
}

/// Runs the closed loop for one window. The plant starts at rest at the
/// reference's initial level and the PI integral is preset so the first
/// control sample holds that equilibrium.
pub fn simulate_window<R: Rng + ?Sized>(
    sched: &GainSchedule,
    theta: &ThetaMap,
    reference: &Reference,
    cfg: &EnvConfig,
    plant_cfg: &PlantConfig,
    rng: &mut R,
) -> Result<SignalWindow> {
    let u0 = if plant_cfg.literal_paper_sign {
        -reference.initial
    } else {
        reference.initial
    };
    let mut plant = PlantState::new(reference.initial, u0);
    let mut pi = PiState::default();
    let mut win = SignalWindow::default();
    let w_true = reference.w;

    for k in 0..cfg.window_len {
        let t = k as f64 * cfg.dt;
        let (y, w_meas) = measure(&plant, w_true, &plant_cfg.noise, rng);
        let yd = reference.y_d(t);
        let e = yd - y;
        let w_sched = if cfg.observe_true_w { w_true } else { w_meas };
        let (kp, ki) = sched.gains(w_sched);
        if k == 0 && ki > 0.0 {
            pi.integral = u0 / ki;
        }
        let u = pi.step(e, (kp, ki), cfg.dt, cfg.integral_clamp)?;
        let row = [t, yd, y, e, kp, ki, u, w_sched[0], w_sched[1]];
        if row.iter().any(|v| !v.is_finite()) {
            win.diverged = true;
            break;
        }
        win.push(row);
        plant.advance(u, w_true, cfg.dt, theta, plant_cfg)?;
        if !plant.x.is_finite() || plant.x.abs() > cfg.divergence_bound {
            win.diverged = true;
            break;
        }
    }
    if win.diverged {
        // pad so every channel keeps length T
        let last = if win.is_empty() {
            [0.0; 9]
        } else {
            win.row(win.len() - 1)
        };
        while win.len() < cfg.window_len {
            let mut row = last;
            row[0] = win.len() as f64 * cfg.dt;
            win.push(row);
        }
    }
    Ok(win)
}

/// Indices of the next outer control points around the band
/// `[mean - std, mean + std]` of the operating trajectory, per axis, combined
/// as an outer product in row-major order.
pub fn select_cps(w1: &[f64], w2: &[f64], g: &BsgGeometry) -> Result<Vec<CpIndex>> {
    if w1.is_empty() || w2.is_empty() {
        return Err(Error::invalid("operating trajectories must be nonempty"));
    }
    let mut per_axis = Vec::with_capacity(2);
    for (axis, traj) in [w1, w2].into_iter().enumerate() {
        let grev = g.greville_abscissae(axis)?;
        per_axis.push(bracket(traj, &grev));
    }
    let (a, b) = (per_axis[0], per_axis[1]);
    Ok(vec![
        CpIndex::new([a.0, b.0]),
        CpIndex::new([a.0, b.1]),
        CpIndex::new([a.1, b.0]),
        CpIndex::new([a.1, b.1]),
    ])
}

fn bracket(traj: &[f64], grev: &[f64]) -> (usize, usize) {
    let n = traj.len() as f64;
    let mean = traj.iter().sum::<f64>() / n;
    let std = (traj.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (lo_v, hi_v) = (mean - std, mean + std);
    let m = grev.len();

    let mut lo = match grev.iter().rposition(|&g| g <= lo_v) {
        Some(i) => {
            // ties go to the lowest index sharing that abscissa
            let mut i = i;
            while i > 0 && grev[i - 1] == grev[i] {
                i -= 1;
            }
            i
        }
        None => 0,
    };
    let mut hi = grev.iter().position(|&g| g >= hi_v).unwrap_or(m - 1);
    if hi < lo {
        hi = lo;
    }
    if lo == hi {
        if hi + 1 < m {
            hi += 1;
        } else {
            lo -= 1;
        }
    }
    (lo, hi)
}

/// Validated action in `[-1, 1]^8`; the first four components move kP control
/// points, the last four kI control points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action(pub [f64; ACTION_DIM]);

impl Action {
    pub fn from_slice(a: &[f64]) -> Result<Self> {
        if a.len() != ACTION_DIM {
            return Err(Error::invalid(format!("action has dimension {}, expected {ACTION_DIM}", a.len())));
        }
        if let Some(v) = a.iter().find(|v| !(v.abs() <= 1.0)) {
            return Err(Error::invalid(format!("action component {v} outside [-1, 1]")));
        }
        let mut out = [0.0; ACTION_DIM];
        out.copy_from_slice(a);
        Ok(Action(out))
    }

    pub fn zeros() -> Self {
        Action([0.0; ACTION_DIM])
    }
}

/// Adds `a_i * delta_max` to the selected control points of each surface.
pub fn apply_action(
    a: &Action,
    sched: &GainSchedule,
    selected_kp: &[CpIndex],
    selected_ki: &[CpIndex],
    delta_max: f64,
    sched_cfg: &ScheduleConfig,
) -> Result<GainSchedule> {
    if selected_kp.len() != 4 || selected_ki.len() != 4 {
        return Err(Error::invalid("exactly four control points per surface must be selected"));
    }
    let deltas = |idx: &[CpIndex], comps: &[f64]| {
        let mut m = BTreeMap::new();
        for (i, &c) in idx.iter().zip(comps) {
            *m.entry(i.clone()).or_insert(0.0) += c * delta_max;
        }
        m
    };
    let clamp = sched_cfg.clamp();
    let mut out = sched.clone();
    out.kp.apply_delta_mut(&deltas(selected_kp, &a.0[..4]), clamp)?;
    out.ki.apply_delta_mut(&deltas(selected_ki, &a.0[4..]), clamp)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_j: f64,
    pub r_a: f64,
    pub r_sc: f64,
    pub total: f64,
}

/// `r_J = -(1/T) sum (Q e^2 + R u^2) dt`, `r_a = -(1/8) sum |a_i|`,
/// `r_sc = 1` when `r_J` beats the running average of past episodes.
pub fn reward_terms(win: &SignalWindow, a: &Action, ema: Option<f64>, cfg: &EnvConfig) -> RewardBreakdown {
    let r_j = if win.diverged {
        cfg.r_j_floor
    } else {
        let t = win.len() as f64;
        let cost: f64 = win
            .e
            .iter()
            .zip(&win.u)
            .map(|(e, u)| (cfg.q * e * e + cfg.r * u * u) * cfg.dt)
            .sum();
        -cost / t
    };
    let r_a = -a.0.iter().map(|v| v.abs()).sum::<f64>() / ACTION_DIM as f64;
    let r_sc = match ema {
        Some(m) if r_j > m => 1.0,
        _ => 0.0,
    };
    RewardBreakdown {
        r_j,
        r_a,
        r_sc,
        total: cfg.b1 * r_j + cfg.b2 * r_a + cfg.b3 * r_sc,
    }
}

pub fn update_ema(ema: Option<f64>, episode_mean: f64, alpha: f64) -> f64 {
    match ema {
        None => episode_mean,
        Some(m) => (1.0 - alpha) * m + alpha * episode_mean,
    }
}

pub fn build_observation(win: &SignalWindow, stationary: &[f64], norm: &ChannelNorm) -> Observation {
    let mut series = Vec::with_capacity(win.len() * NUM_CHANNELS);
    for k in 0..win.len() {
        for c in 0..NUM_CHANNELS {
            series.push(norm.normalize(c, win.channel(c)[k]));
        }
    }
    Observation {
        stationary: stationary.to_vec(),
        series,
    }
}

/// Everything an environment needs besides its seed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnvSetup {
    pub env: EnvConfig,
    pub plant: PlantConfig,
    pub schedule: ScheduleConfig,
}

impl EnvSetup {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.plant.validate(&self.env.operating_box)?;
        self.schedule.validate()
    }
}

/// Mutable per-episode state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    /// 1-based index of the next step.
    pub k: usize,
    pub schedule: GainSchedule,
    pub theta: ThetaMap,
    pub ema: Option<f64>,
    pub r_j_sum: f64,
    pub selected_kp: Vec<CpIndex>,
    pub selected_ki: Vec<CpIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvRngs {
    pub theta: StreamRng,
    pub reference: StreamRng,
    pub noise: StreamRng,
}

impl EnvRngs {
    pub fn from_master(master: u64, prefix: &str) -> Self {
        EnvRngs {
            theta: seeds::stream(master, &format!("{prefix}{}", seeds::labels::THETA)),
            reference: seeds::stream(master, &format!("{prefix}{}", seeds::labels::REFERENCE)),
            noise: seeds::stream(master, &format!("{prefix}{}", seeds::labels::NOISE)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: RewardBreakdown,
    pub window: SignalWindow,
}

/// Serializable snapshot of an [`Env`] for checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub episode: u64,
    pub state: Option<EpisodeState>,
    pub ema: Option<f64>,
    pub rngs: EnvRngs,
}

#[derive(Debug, Clone)]
pub struct Env {
    setup: EnvSetup,
    norm: ChannelNorm,
    rngs: EnvRngs,
    state: Option<EpisodeState>,
    /// Survives resets.
    ema: Option<f64>,
    episode: u64,
}

impl Env {
    pub fn new(setup: EnvSetup, rngs: EnvRngs) -> Result<Self> {
        setup.validate()?;
        let norm = ChannelNorm::from_config(&setup.env, &setup.schedule);
        Ok(Env {
            setup,
            norm,
            rngs,
            state: None,
            ema: None,
            episode: 0,
        })
    }

    pub fn from_seed(setup: EnvSetup, master: u64) -> Result<Self> {
        Env::new(setup, EnvRngs::from_master(master, ""))
    }

    pub fn setup(&self) -> &EnvSetup {
        &self.setup
    }

    pub fn config(&self) -> &EnvConfig {
        &self.setup.env
    }

    pub fn norm(&self) -> &ChannelNorm {
        &self.norm
    }

    pub fn state(&self) -> Option<&EpisodeState> {
        self.state.as_ref()
    }

    pub fn ema(&self) -> Option<f64> {
        self.ema
    }

    /// Number of completed or started episodes.
    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn obs_len(&self) -> usize {
        self.setup.env.obs_len()
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            episode: self.episode,
            state: self.state.clone(),
            ema: self.ema,
            rngs: self.rngs.clone(),
        }
    }

    pub fn restore(setup: EnvSetup, snap: EnvSnapshot) -> Result<Self> {
        let mut env = Env::new(setup, snap.rngs)?;
        env.episode = snap.episode;
        env.state = snap.state;
        env.ema = snap.ema;
        Ok(env)
    }

    /// Starts a new episode from the baseline schedule.
    pub fn reset(&mut self) -> Result<Observation> {
        let EnvSetup { env, plant, schedule } = &self.setup;
        let theta = sample_theta(&plant.theta, &env.operating_box, &mut self.rngs.theta)?;
        let sched = GainSchedule::baseline(schedule, &env.operating_box)?;
        let reference = sample_reference(env, &mut self.rngs.reference);
        let win = simulate_window(&sched, &theta, &reference, env, plant, &mut self.rngs.noise)?;
        let obs = build_observation(&win, &env.stationary, &self.norm);
        let selected_kp = select_cps(&win.w1, &win.w2, &sched.kp)?;
        let selected_ki = select_cps(&win.w1, &win.w2, &sched.ki)?;
        self.episode += 1;
        self.state = Some(EpisodeState {
            k: 1,
            schedule: sched,
            theta,
            ema: self.ema,
            r_j_sum: 0.0,
            selected_kp,
            selected_ki,
        });
        Ok(obs)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let a = Action::from_slice(action)?;
        let EnvSetup { env, plant, schedule } = &self.setup;
        let st = self
            .state
            .as_mut()
            .ok_or_else(|| Error::invalid("step called before reset"))?;
        if st.k > env.max_steps {
            return Err(Error::invalid("episode finished; call reset"));
        }
        st.schedule = apply_action(&a, &st.schedule, &st.selected_kp, &st.selected_ki, env.delta_max, schedule)?;
        let reference = sample_reference(env, &mut self.rngs.reference);
        let win = simulate_window(&st.schedule, &st.theta, &reference, env, plant, &mut self.rngs.noise)?;
        let info = reward_terms(&win, &a, self.ema, env);
        st.r_j_sum += info.r_j;
        st.k += 1;
        let done = st.k > env.max_steps;
        if done {
            let mean = st.r_j_sum / env.max_steps as f64;
            self.ema = Some(update_ema(self.ema, mean, env.ema_alpha));
            st.ema = self.ema;
        }
        st.selected_kp = select_cps(&win.w1, &win.w2, &st.schedule.kp)?;
        st.selected_ki = select_cps(&win.w1, &win.w2, &st.schedule.ki)?;
        let obs = build_observation(&win, &env.stationary, &self.norm);
        Ok(StepResult {
            obs,
            reward: info.total,
            done,
            info,
            window: win,
        })
    }
}

/// Appends `episode,k,r_J,r_a,r_sc,r_total,ema` rows.
pub struct StepLogger<W: Write> {
    out: W,
}

impl<W: Write> StepLogger<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "episode,k,r_J,r_a,r_sc,r_total,ema")?;
        Ok(StepLogger { out })
    }

    pub fn log(&mut self, episode: u64, k: usize, r: &RewardBreakdown, ema: Option<f64>) -> Result<()> {
        let ema = ema.map(|v| v.to_string()).unwrap_or_default();
        writeln!(self.out, "{episode},{k},{},{},{},{},{ema}", r.r_j, r.r_a, r.r_sc, r.total)?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
