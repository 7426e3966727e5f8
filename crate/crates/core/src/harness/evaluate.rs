//! Scenario evaluation: adapt a schedule online, then compare it with the
//! baseline on fixed step responses.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{flatten, write_atomic, Checkpoint};
use crate::control::GainSchedule;
use crate::env::{reward_terms, simulate_window, Action, Env, EnvRngs, Reference, SignalWindow, ACTION_DIM};
use crate::error::{Error, Result};
use crate::learner::{share_obs, ActMode};
use crate::plant::{NoiseConfig, ThetaFamilyConfig, ThetaMap};
use crate::seeds;

pub const SCENARIO_VERSION: u32 = 1;
pub const REPORT_HEADER: &str = "point,w1,w2,baseline_r_j,adapted_r_j,baseline_rise_time,adapted_rise_time,\
baseline_overshoot,adapted_overshoot,baseline_sse,adapted_sse";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioMode {
    /// Adapt with the checkpoint's deterministic policy.
    #[default]
    Policy,
    /// Keep the baseline schedule.
    Baseline,
    /// Replace the schedule by constant hand-picked gains.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleGains {
    pub kp: f64,
    pub ki: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub version: u32,
    pub mode: ScenarioMode,
    pub adaptation_steps: usize,
    pub seed: u64,
    /// Fixed plant coefficients `c0..c4`; sampled from the run's family when
    /// absent.
    pub theta: Option<[f64; 5]>,
    /// Measurement noise during adaptation; the run's setting when absent.
    pub noise: Option<NoiseConfig>,
    /// Comparison points; four interior points of the box when empty.
    pub operating_points: Vec<[f64; 2]>,
    pub initial: f64,
    pub level: f64,
    /// Step time of the comparison reference in seconds.
    pub step_time: f64,
    /// Length of each comparison response in seconds.
    pub duration: f64,
    /// Keep measurement noise on during the comparison.
    pub comparison_noise: bool,
    /// Tail fraction of the response averaged for the steady-state error.
    pub settle_fraction: f64,
    pub oracle: Option<OracleGains>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            version: SCENARIO_VERSION,
            mode: ScenarioMode::Policy,
            adaptation_steps: 150,
            seed: 0,
            theta: None,
            noise: None,
            operating_points: Vec::new(),
            initial: 0.0,
            level: 1.0,
            step_time: 0.5,
            duration: 10.0,
            comparison_noise: false,
            settle_fraction: 0.2,
            oracle: None,
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| Error::config("scenario", e.to_string()))?;
        if let Some(v) = value.get("version") {
            let found = v.as_integer().unwrap_or(-1);
            if found != SCENARIO_VERSION as i64 {
                return Err(Error::Version {
                    found: found.max(0) as u32,
                    supported: SCENARIO_VERSION,
                });
            }
        }
        let sc: Scenario = toml::from_str(text).map_err(|e| {
            Error::config("scenario", e.to_string().lines().filter(|l| !l.trim().is_empty()).collect::<Vec<_>>().join(" "))
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read scenario {}: {e}", path.display())))?;
        Scenario::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.adaptation_steps == 0 {
            return Err(Error::config("adaptation_steps", "must be >= 1"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::config("duration", "must be > 0"));
        }
        if !(self.step_time >= 0.0 && self.step_time < self.duration) {
            return Err(Error::config("step_time", "must lie in [0, duration)"));
        }
        if self.initial == self.level || !self.initial.is_finite() || !self.level.is_finite() {
            return Err(Error::config("level", "must be finite and differ from initial"));
        }
        if !(self.settle_fraction > 0.0 && self.settle_fraction <= 1.0) {
            return Err(Error::config("settle_fraction", "must lie in (0, 1]"));
        }
        if self.mode == ScenarioMode::Oracle && self.oracle.is_none() {
            return Err(Error::config("oracle", "oracle mode needs [oracle] kp and ki"));
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        Ok(())
    }
}

/// Step-response figures of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseMetrics {
    pub r_j: f64,
    /// 10 % to 90 % rise time in seconds; `None` if 90 % is never reached.
    pub rise_time: Option<f64>,
    /// Peak excursion past the target as a percentage of the step size.
    pub overshoot: f64,
    /// Mean `|e|` over the settling tail.
    pub steady_state_error: f64,
}

pub fn response_metrics(win: &SignalWindow, sc: &Scenario, r_j: f64) -> ResponseMetrics {
    let amp = sc.level - sc.initial;
    let progress = |y: f64| (y - sc.initial) / amp;
    let after: Vec<(f64, f64)> = win
        .t
        .iter()
        .zip(&win.y)
        .filter(|(t, _)| **t >= sc.step_time)
        .map(|(t, y)| (*t, progress(*y)))
        .collect();
    let cross = |frac: f64| after.iter().find(|(_, p)| *p >= frac).map(|(t, _)| *t);
    let rise_time = match (cross(0.1), cross(0.9)) {
        (Some(a), Some(b)) => Some(b - a),
        _ => None,
    };
    let peak = after.iter().map(|(_, p)| *p).fold(f64::NEG_INFINITY, f64::max);
    let overshoot = (100.0 * (peak - 1.0)).max(0.0);
    let n = win.len();
    let tail = ((n as f64 * sc.settle_fraction).ceil() as usize).clamp(1, n);
    let sse = win.e[n - tail..].iter().map(|e| e.abs()).sum::<f64>() / tail as f64;
    ResponseMetrics {
        r_j,
        rise_time,
        overshoot,
        steady_state_error: sse,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub w: [f64; 2],
    pub baseline: ResponseMetrics,
    pub adapted: ResponseMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: ScenarioMode,
    pub adaptation_steps: usize,
    /// Mean `r_J` and total reward over the adaptation rollout.
    pub adaptation_mean_r_j: f64,
    pub adaptation_mean_reward: f64,
    pub points: Vec<PointReport>,
    pub baseline_mean_sse: f64,
    pub adapted_mean_sse: f64,
    pub baseline_mean_r_j: f64,
    pub adapted_mean_r_j: f64,
}

fn default_points(ck: &Checkpoint) -> Vec<[f64; 2]> {
    let bx = ck.config.env.operating_box;
    let at = |ax: usize, f: f64| bx.lo[ax] + f * (bx.hi[ax] - bx.lo[ax]);
    let mut out = Vec::new();
    for f0 in [0.25, 0.75] {
        for f1 in [0.25, 0.75] {
            out.push([at(0, f0), at(1, f1)]);
        }
    }
    out
}

/// Runs the scenario against a checkpoint and writes trajectories, the
/// report and the adapted schedule into `out`.
pub fn evaluate(ck: &Checkpoint, sc: &Scenario, out: &Path) -> Result<EvaluationReport> {
    sc.validate()?;
    let cfg = &ck.config;
    let mut setup = cfg.setup();
    setup.env.max_steps = sc.adaptation_steps;
    if let Some(c) = sc.theta {
        setup.plant.theta = ThetaFamilyConfig::fixed(c);
    }
    if let Some(n) = &sc.noise {
        setup.plant.noise = n.clone();
    }
    setup.validate()?;
    let points = if sc.operating_points.is_empty() {
        default_points(ck)
    } else {
        sc.operating_points.clone()
    };
    for (i, w) in points.iter().enumerate() {
        if !setup.env.operating_box.contains(*w) {
            return Err(Error::config(
                format!("operating_points[{i}]"),
                format!("{w:?} lies outside the operating box"),
            ));
        }
    }
    fs::create_dir_all(out)?;

    // adaptation rollout, one episode of `adaptation_steps` decisions
    let agent = match sc.mode {
        ScenarioMode::Policy => Some(ck.agent()?),
        _ => None,
    };
    let mut env = Env::new(setup.clone(), EnvRngs::from_master(sc.seed, "scenario/"))?;
    let mut obs = flatten(&env.reset()?);
    let mut unused = seeds::stream(sc.seed, "scenario/unused");
    let mut log = String::from("k,r_J,r_a,r_sc,r_total\n");
    let (mut rj_sum, mut rew_sum) = (0.0, 0.0);
    for k in 1..=sc.adaptation_steps {
        let a = match &agent {
            Some(agent) => {
                let o: Vec<f64> = share_obs(&obs).iter().map(|&v| v as f64).collect();
                agent.act(&o, ActMode::Deterministic, &mut unused)?
            }
            None => [0.0; ACTION_DIM],
        };
        let res = env.step(&a)?;
        let r = res.info;
        let _ = writeln!(log, "{k},{},{},{},{}", r.r_j, r.r_a, r.r_sc, r.total);
        rj_sum += r.r_j;
        rew_sum += r.total;
        obs = flatten(&res.obs);
    }
    write_atomic(&out.join("adaptation.csv"), log.as_bytes())?;
    let state = env.state().expect("episode started");
    let theta: ThetaMap = state.theta.clone();
    let baseline = GainSchedule::baseline(&setup.schedule, &setup.env.operating_box)?;
    let adapted = match (sc.mode, sc.oracle) {
        (ScenarioMode::Oracle, Some(o)) => {
            GainSchedule::constant(&setup.schedule, &setup.env.operating_box, o.kp, o.ki)?
        }
        _ => state.schedule.clone(),
    };
    write_atomic(&out.join("schedule.json"), serde_json::to_string_pretty(&adapted)?.as_bytes())?;

    // comparison on fixed step responses
    let mut cmp_env = setup.env.clone();
    cmp_env.window_len = (sc.duration / cmp_env.dt).round().max(1.0) as usize;
    let mut cmp_plant = setup.plant.clone();
    if !sc.comparison_noise {
        cmp_plant.noise = NoiseConfig::disabled();
    }
    let mut reports = Vec::with_capacity(points.len());
    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    for (i, w) in points.iter().enumerate() {
        let reference = Reference {
            initial: sc.initial,
            level: sc.level,
            step_time: sc.step_time,
            w: *w,
        };
        let run = |sched: &GainSchedule, name: &str| -> Result<ResponseMetrics> {
            // the same noise stream for both schedules
            let mut rng = seeds::stream(sc.seed, &format!("scenario/compare/{i}"));
            let win = simulate_window(sched, &theta, &reference, &cmp_env, &cmp_plant, &mut rng)?;
            write_atomic(&out.join(format!("trajectory_op{i}_{name}.csv")), win.to_csv().as_bytes())?;
            let r_j = reward_terms(&win, &Action::zeros(), None, &cmp_env).r_j;
            Ok(response_metrics(&win, sc, r_j))
        };
        let b = run(&baseline, "baseline")?;
        let a = run(&adapted, "adapted")?;
        let rt = |m: &ResponseMetrics| m.rise_time.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{},{},{},{},{},{}",
            w[0],
            w[1],
            b.r_j,
            a.r_j,
            rt(&b),
            rt(&a),
            b.overshoot,
            a.overshoot,
            b.steady_state_error,
            a.steady_state_error
        );
        reports.push(PointReport {
            w: *w,
            baseline: b,
            adapted: a,
        });
    }
    write_atomic(&out.join("report.csv"), csv.as_bytes())?;
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&PointReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let report = EvaluationReport {
        mode: sc.mode,
        adaptation_steps: sc.adaptation_steps,
        adaptation_mean_r_j: rj_sum / sc.adaptation_steps as f64,
        adaptation_mean_reward: rew_sum / sc.adaptation_steps as f64,
        baseline_mean_sse: mean(&|p| p.baseline.steady_state_error),
        adapted_mean_sse: mean(&|p| p.adapted.steady_state_error),
        baseline_mean_r_j: mean(&|p| p.baseline.r_j),
        adapted_mean_r_j: mean(&|p| p.adapted.r_j),
        points: reports,
    };
    write_atomic(&out.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_defaults_and_version() {
        assert_eq!(Scenario::from_toml("").unwrap(), Scenario::default());
        let err = Scenario::from_toml("version = 7\n").unwrap_err();
        assert!(matches!(err, Error::Version { found: 7, supported: 1 }), "{err}");
        assert!(Scenario::from_toml("mode = \"oracle\"\n").is_err());
        assert!(Scenario::from_toml("bogus = 1\n").is_err());
        let sc = Scenario::from_toml("mode = \"oracle\"\n[oracle]\nkp = 2.0\nki = 1.0\n").unwrap();
        assert_eq!(sc.oracle, Some(OracleGains { kp: 2.0, ki: 1.0 }));
    }

    #[test]
    fn metrics_of_a_clean_first_order_response() {
        let sc = Scenario {
            step_time: 0.0,
            ..Scenario::default()
        };
        let mut win = SignalWindow::default();
        for k in 0..200 {
            let t = k as f64 * 0.05;
            let y = 1.0 - (-t).exp();
            win.t.push(t);
            win.y.push(y);
            win.e.push(1.0 - y);
        }
        let m = response_metrics(&win, &sc, -0.1);
        // exact 10-90 % rise time of 1 - exp(-t) is ln 9, sampled at 0.05 s
        assert!((m.rise_time.unwrap() - 9f64.ln()).abs() < 0.06);
        assert_eq!(m.overshoot, 0.0);
        assert!(m.steady_state_error < 1e-3);
    }
}
